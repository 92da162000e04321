"""Independent oracles shared by the test modules."""
import numpy as np


def central_difference(f, arr, idx, h=1e-3):
    """d f / d arr[idx] by central differences; restores arr."""
    old = arr[idx]
    arr[idx] = old + h
    fp = f()
    arr[idx] = old - h
    fm = f()
    arr[idx] = old
    return (fp - fm) / (2 * h)


def rel_error(analytic, numeric):
    """||a - n|| / max(||a||, ||n||) over the sampled coordinates."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(n))
    return 0.0 if denom == 0 else float(np.linalg.norm(a - n) / denom)


def sample_indices(shape, k, rng):
    size = int(np.prod(shape))
    flat = rng.choice(size, size=min(k, size), replace=False)
    return [np.unravel_index(i, shape) for i in flat]


def naive_conv1d(x, w, b, stride=2):
    """Direct loops over [batch x in_ch x L] with one left zero pad (kernel 3)."""
    n, c, length = x.shape
    o, _, k = w.shape
    out_len = -(-length // stride)
    y = np.zeros((n, o, out_len))
    for bi in range(n):
        for oi in range(o):
            for j in range(out_len):
                acc = b[oi]
                for ci in range(c):
                    for ki in range(k):
                        p = stride * j + ki - (k - 1) // 2
                        if 0 <= p < length:
                            acc += w[oi, ci, ki] * x[bi, ci, p]
                y[bi, oi, j] = acc
    return y


def scalar_adam(theta, grads, lr=1e-4, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        theta = theta - lr * (m / (1 - b1 ** t)) / ((v / (1 - b2 ** t)) ** 0.5 + eps)
    return theta


def model_gradcheck(params, x, labels, eps_ls, coords_per_tensor, rng, h=1e-3, tensors=None):
    """Relative error per learnable tensor, activation gates held at the base point.

    The analytic gradient comes from ``params`` in its own dtype; the finite
    differences always run on a float64 copy, so a float32 model is judged
    against a double-precision oracle.
    """
    from ecgmi.nn import model_backward, model_forward, smoothed_cross_entropy

    logits, cache = model_forward(x, params, "train")
    _, dlogits = smoothed_cross_entropy(logits, labels, eps_ls)
    grads = model_backward(cache, dlogits)
    masks = cache.masks
    ref = params.astype(np.float64)
    x64 = np.asarray(x, dtype=np.float64)

    def loss():
        lg, _ = model_forward(x64, ref, "train", masks=masks)
        return smoothed_cross_entropy(lg, labels, eps_ls)[0]

    out = {}
    learn = ref.learnables()
    for name in (tensors or learn):
        arr = learn[name]
        idx = sample_indices(arr.shape, coords_per_tensor, rng)
        num = [central_difference(loss, arr, i, h) for i in idx]
        ana = [grads[name][i] for i in idx]
        out[name] = rel_error(ana, num)
    return out
