"""Scalar-loop reference implementations.

Deliberately written with plain Python loops over nested lists so that they
share no code path with the vectorized torch implementations under test.
"""
import math


def to_list(x):
    return x.tolist() if hasattr(x, "tolist") else x


def cosine_code(vec, protos):
    vec, protos = to_list(vec), to_list(protos)
    vn = math.sqrt(sum(v * v for v in vec))
    out = []
    for row in protos:
        dot = 0.0
        pn = 0.0
        for a, b in zip(row, vec):
            dot += a * b
            pn += a * a
        out.append(dot / (math.sqrt(pn) * vn))
    return out


def sinkhorn_plan(codes, eps, n_iters):
    """Alternating row (sample) / column (concept) normalization of exp(codes/eps)."""
    codes = to_list(codes)
    B, K = len(codes), len(codes[0])
    Q = [[math.exp((c - max(row)) / eps) for c in row] for row in codes]
    for _ in range(n_iters):
        for b in range(B):
            s = sum(Q[b])
            Q[b] = [q / s / B for q in Q[b]]
        for k in range(K):
            s = sum(Q[b][k] for b in range(B))
            for b in range(B):
                Q[b][k] = Q[b][k] / s / K
    return Q


def soft_codes(codes, eps, n_iters):
    Q = sinkhorn_plan(codes, eps, n_iters)
    return [[q / sum(row) for q in row] for row in Q]


def log_softmax(row, tau):
    m = max(r / tau for r in row)
    lse = m + math.log(sum(math.exp(r / tau - m) for r in row))
    return [r / tau - lse for r in row]


def cross_entropy(target, code, tau):
    ls = log_softmax(code, tau)
    return -sum(t * l for t, l in zip(target, ls))


def alignment(q_s, q_d, q_v, soft, k_static, tau):
    q_s, q_d, q_v = to_list(q_s), to_list(q_d), to_list(q_v)
    soft = {k: to_list(v) for k, v in soft.items()}
    total = 0.0
    B = len(q_s)
    for b in range(B):
        vs, vd = q_v[b][:k_static], q_v[b][k_static:]
        total += cross_entropy(soft["s"][b], vs, tau)
        total += cross_entropy(soft["v_s"][b], q_s[b], tau)
        total += cross_entropy(soft["d"][b], vd, tau)
        total += cross_entropy(soft["v_d"][b], q_d[b], tau)
    return total / B


def diversity(q_s, q_d, q_v):
    total = 0.0
    rows = [to_list(q_s), to_list(q_d), to_list(q_v)]
    B = len(rows[0])
    for b in range(B):
        for q in rows:
            for x in q[b]:
                total += abs(x)
    return total / B


def affine(x, weight, bias):
    """weight laid out [out, in] like torch.nn.Linear."""
    return [sum(w * xi for w, xi in zip(row, x)) + bb for row, bb in zip(weight, bias)]


def mlp2(x, w1, b1, w2, b2):
    h = [max(0.0, v) for v in affine(x, w1, b1)]
    return affine(h, w2, b2)


def fidelity(codes, targets, heads):
    """heads[key] = (w1, b1, w2, b2) as nested lists."""
    total = 0.0
    B = len(to_list(codes["s"]))
    for b in range(B):
        for key in ("s", "d", "v"):
            rec = mlp2(to_list(codes[key])[b], *heads[key])
            tgt = to_list(targets[key])[b]
            total += sum((r - t) ** 2 for r, t in zip(rec, tgt))
    return total / B


def attention(protos, tokens, Wq, Wk, Wv):
    """protos [K][C], tokens [N][C]; returns (outputs [K][C], weights [K][N])."""
    protos, tokens = to_list(protos), to_list(tokens)
    Wq, Wk, Wv = to_list(Wq), to_list(Wk), to_list(Wv)
    zero_q = [0.0] * len(Wq)
    zero_v = [0.0] * len(Wv)
    keys = [affine(t, Wk, [0.0] * len(Wk)) for t in tokens]
    vals = [affine(t, Wv, zero_v) for t in tokens]
    ca = len(Wq)
    outs, weights = [], []
    for p in protos:
        q = affine(p, Wq, zero_q)
        logits = [sum(a * b for a, b in zip(q, k)) / math.sqrt(ca) for k in keys]
        m = max(logits)
        e = [math.exp(l - m) for l in logits]
        z = sum(e)
        w = [x / z for x in e]
        out = [q[c] + sum(w[n] * vals[n][c] for n in range(len(tokens))) for c in range(len(q))]
        outs.append(out)
        weights.append(w)
    return outs, weights


def top_k(code, k):
    """Indexes of the k largest entries, lower index wins ties."""
    code = to_list(code)
    order = sorted(range(len(code)), key=lambda i: (-code[i], i))
    return set(order[:k])


def margin_loss(F_a, F_b, idx, negatives, lam):
    F_a, F_b = to_list(F_a), to_list(F_b)
    negatives = [to_list(n) for n in negatives]
    total = 0.0
    for k in idx:
        total += sum((a - b) ** 2 for a, b in zip(F_a[k], F_b[k]))
        for n in negatives:
            d = math.sqrt(sum((a - b) ** 2 for a, b in zip(F_a[k], n[k])))
            total += max(lam - d, 0.0) ** 2
    return total


def local_total(F_s, F_v, F_d, q_s, q_v, q_d, k_static, K_top, lam):
    F_s, F_v, F_d = to_list(F_s), to_list(F_v), to_list(F_d)
    q_s, q_v, q_d = to_list(q_s), to_list(q_v), to_list(q_d)
    B = len(F_s)
    F_vs = [row[:k_static] for row in F_v]
    F_vd = [row[k_static:] for row in F_v]
    total = 0.0
    for i in range(B):
        idx_s = sorted(top_k(q_s[i], K_top) & top_k(q_v[i][:k_static], K_top))
        idx_d = sorted(top_k(q_d[i], K_top) & top_k(q_v[i][k_static:], K_top))
        others = [j for j in range(B) if j != i]
        total += margin_loss(F_s[i], F_vs[i], idx_s, [F_vs[j] for j in others], lam)
        total += margin_loss(F_vs[i], F_s[i], idx_s, [F_s[j] for j in others], lam)
        total += margin_loss(F_d[i], F_vd[i], idx_d, [F_vd[j] for j in others], lam)
        total += margin_loss(F_vd[i], F_d[i], idx_d, [F_d[j] for j in others], lam)
    return total / B


def overall(l_aln, l_loc, l_fid, l_div, alpha, beta, gamma, epoch, warmup):
    loc = l_loc if epoch >= warmup else 0.0
    return l_aln + alpha * loc + beta * l_fid + gamma * l_div
