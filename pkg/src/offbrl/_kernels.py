"""Hot numeric kernels with a numba path and a pure-numpy fallback.

The numba path is used when numba imports cleanly and ``OFFBRL_NO_NUMBA`` is
unset (or ``0``). Both paths take the same arguments and agree to rounding
error; within one path results are bit-reproducible.

Network parameters live in one flat float64 vector. ``layout`` is an int64
array of shape (L, 3) holding ``(fan_in, fan_out, activation)`` per layer;
each layer occupies ``fan_in * fan_out`` weights (row-major, input-major)
followed by ``fan_out`` biases. Dropout masks are (B, sum(fan_in)) arrays
multiplying the input of every layer.
"""

import os

import numpy as np

IDENTITY, RELU, TANH = 0, 1, 2
ACTIVATIONS = {"identity": IDENTITY, "relu": RELU, "tanh": TANH}

_flag = os.environ.get("OFFBRL_NO_NUMBA", "").strip().lower()
try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and _flag in ("", "0", "false", "no")

_EMPTY_MASK = np.ones((0, 0))


# ---------------------------------------------------------------------------
# numpy path
# ---------------------------------------------------------------------------


def _act_np(z, code):
    if code == RELU:
        return np.maximum(z, 0.0)
    if code == TANH:
        return np.tanh(z)
    return z


def _act_grad_np(z, code):
    if code == RELU:
        return (z > 0.0).astype(np.float64)
    if code == TANH:
        t = np.tanh(z)
        return 1.0 - t * t
    return np.ones_like(z)


def _layers(params, layout):
    off = 0
    moff = 0
    for n_in, n_out, act in layout:
        n_in, n_out = int(n_in), int(n_out)
        W = params[off:off + n_in * n_out].reshape(n_in, n_out)
        off += n_in * n_out
        b = params[off:off + n_out]
        off += n_out
        yield W, b, int(act), moff, n_in
        moff += n_in


def mlp_forward_np(params, layout, X, masks):
    h = X
    use_mask = masks.shape[1] > 0
    for W, b, act, moff, n_in in _layers(params, layout):
        if use_mask:
            h = h * masks[:, moff:moff + n_in]
        h = _act_np(h @ W + b, act)
    return h


def mlp_backward_np(params, layout, X, masks, dout):
    use_mask = masks.shape[1] > 0
    layers = list(_layers(params, layout))
    inputs, pre = [], []
    h = X
    for W, b, act, moff, n_in in layers:
        if use_mask:
            h = h * masks[:, moff:moff + n_in]
        inputs.append(h)
        z = h @ W + b
        pre.append(z)
        h = _act_np(z, act)
    grads = []
    delta = dout * _act_grad_np(pre[-1], layers[-1][2])
    for i in range(len(layers) - 1, -1, -1):
        W, b, act, moff, n_in = layers[i]
        grads.append(delta.sum(axis=0))
        grads.append((inputs[i].T @ delta).ravel())
        if i > 0:
            dh = delta @ W.T
            if use_mask:
                dh = dh * masks[:, moff:moff + n_in]
            delta = dh * _act_grad_np(pre[i - 1], layers[i - 1][2])
    return np.concatenate(grads[::-1])


def _lse_rows_np(A):
    m = A.max(axis=1)
    return m + np.log(np.exp(A - m[:, None]).sum(axis=1))


def value_iteration_np(P, R, gamma, nonterminal, tol, max_iter):
    S, A = R.shape
    Q = np.zeros((S, A))
    residual = np.inf
    it = 0
    while it < max_iter:
        it += 1
        V = Q.max(axis=1) * nonterminal
        Q_new = (R + gamma * (P @ V)) * nonterminal[:, None]
        residual = np.abs(Q_new - Q).max()
        Q = Q_new
        if residual <= tol:
            break
    return Q, it, residual


def soft_value_iteration_np(P, base, gamma, nonterminal, tol, max_iter):
    S, A = base.shape
    Psi = np.zeros((S, A))
    residual = np.inf
    it = 0
    while it < max_iter:
        it += 1
        V = _lse_rows_np(Psi) * nonterminal
        Psi_new = (base + gamma * (P @ V)) * nonterminal[:, None]
        residual = np.abs(Psi_new - Psi).max()
        Psi = Psi_new
        if residual <= tol:
            break
    return Psi, it, residual


# ---------------------------------------------------------------------------
# numba path
# ---------------------------------------------------------------------------

if HAVE_NUMBA:
    njit = numba.njit(cache=True, nogil=True)

    @numba.njit(cache=True, inline="always")
    def _act_nb(z, code):
        if code == 1:
            return z if z > 0.0 else 0.0
        if code == 2:
            return np.tanh(z)
        return z

    @numba.njit(cache=True, inline="always")
    def _act_grad_nb(z, code):
        if code == 1:
            return 1.0 if z > 0.0 else 0.0
        if code == 2:
            t = np.tanh(z)
            return 1.0 - t * t
        return 1.0

    @njit
    def _offsets_nb(layout):
        L = layout.shape[0]
        poff = np.zeros(L, np.int64)
        moff = np.zeros(L, np.int64)
        p = 0
        m = 0
        width = 0
        for l in range(L):
            poff[l] = p
            moff[l] = m
            p += layout[l, 0] * layout[l, 1] + layout[l, 1]
            m += layout[l, 0]
            width = max(width, layout[l, 0], layout[l, 1])
        return poff, moff, width

    @njit
    def mlp_forward_nb(params, layout, X, masks):
        B = X.shape[0]
        L = layout.shape[0]
        poff, moff, width = _offsets_nb(layout)
        use_mask = masks.shape[1] > 0
        out = np.empty((B, layout[L - 1, 1]))
        h = np.empty(width)
        z = np.empty(width)
        for s in range(B):
            for j in range(layout[0, 0]):
                h[j] = X[s, j]
            for l in range(L):
                n_in = layout[l, 0]
                n_out = layout[l, 1]
                act = layout[l, 2]
                if use_mask:
                    for j in range(n_in):
                        h[j] *= masks[s, moff[l] + j]
                boff = poff[l] + n_in * n_out
                for k in range(n_out):
                    z[k] = params[boff + k]
                for j in range(n_in):
                    hj = h[j]
                    if hj != 0.0:
                        row = poff[l] + j * n_out
                        for k in range(n_out):
                            z[k] += hj * params[row + k]
                for k in range(n_out):
                    h[k] = _act_nb(z[k], act)
            for k in range(layout[L - 1, 1]):
                out[s, k] = h[k]
        return out

    @njit
    def mlp_backward_nb(params, layout, X, masks, dout):
        B = X.shape[0]
        L = layout.shape[0]
        poff, moff, width = _offsets_nb(layout)
        use_mask = masks.shape[1] > 0
        grad = np.zeros(params.shape[0])
        inputs = np.empty((L, width))
        pre = np.empty((L, width))
        delta = np.empty(width)
        dh = np.empty(width)
        for s in range(B):
            # forward, keeping masked layer inputs and pre-activations
            for j in range(layout[0, 0]):
                inputs[0, j] = X[s, j]
            for l in range(L):
                n_in = layout[l, 0]
                n_out = layout[l, 1]
                if use_mask:
                    for j in range(n_in):
                        inputs[l, j] *= masks[s, moff[l] + j]
                boff = poff[l] + n_in * n_out
                for k in range(n_out):
                    pre[l, k] = params[boff + k]
                for j in range(n_in):
                    hj = inputs[l, j]
                    if hj != 0.0:
                        row = poff[l] + j * n_out
                        for k in range(n_out):
                            pre[l, k] += hj * params[row + k]
                if l + 1 < L:
                    for k in range(n_out):
                        inputs[l + 1, k] = _act_nb(pre[l, k], layout[l, 2])
            # reverse sweep
            n_last = layout[L - 1, 1]
            for k in range(n_last):
                delta[k] = dout[s, k] * _act_grad_nb(pre[L - 1, k], layout[L - 1, 2])
            for l in range(L - 1, -1, -1):
                n_in = layout[l, 0]
                n_out = layout[l, 1]
                boff = poff[l] + n_in * n_out
                for k in range(n_out):
                    grad[boff + k] += delta[k]
                for j in range(n_in):
                    hj = inputs[l, j]
                    row = poff[l] + j * n_out
                    acc = 0.0
                    for k in range(n_out):
                        grad[row + k] += hj * delta[k]
                        acc += delta[k] * params[row + k]
                    dh[j] = acc
                if l > 0:
                    for j in range(n_in):
                        g = dh[j]
                        if use_mask:
                            g *= masks[s, moff[l] + j]
                        delta[j] = g * _act_grad_nb(pre[l - 1, j], layout[l - 1, 2])
        return grad

    @njit
    def value_iteration_nb(P, R, gamma, nonterminal, tol, max_iter):
        S, A = R.shape
        Q = np.zeros((S, A))
        V = np.zeros(S)
        residual = np.inf
        it = 0
        while it < max_iter:
            it += 1
            for s in range(S):
                m = Q[s, 0]
                for a in range(1, A):
                    if Q[s, a] > m:
                        m = Q[s, a]
                V[s] = m * nonterminal[s]
            residual = 0.0
            for s in range(S):
                for a in range(A):
                    acc = 0.0
                    for t in range(S):
                        acc += P[s, a, t] * V[t]
                    q = (R[s, a] + gamma * acc) * nonterminal[s]
                    d = abs(q - Q[s, a])
                    if d > residual:
                        residual = d
                    Q[s, a] = q
            if residual <= tol:
                break
        return Q, it, residual

    @njit
    def soft_value_iteration_nb(P, base, gamma, nonterminal, tol, max_iter):
        S, A = base.shape
        Psi = np.zeros((S, A))
        V = np.zeros(S)
        residual = np.inf
        it = 0
        while it < max_iter:
            it += 1
            for s in range(S):
                m = Psi[s, 0]
                for a in range(1, A):
                    if Psi[s, a] > m:
                        m = Psi[s, a]
                acc = 0.0
                for a in range(A):
                    acc += np.exp(Psi[s, a] - m)
                V[s] = (m + np.log(acc)) * nonterminal[s]
            residual = 0.0
            for s in range(S):
                for a in range(A):
                    acc = 0.0
                    for t in range(S):
                        acc += P[s, a, t] * V[t]
                    q = (base[s, a] + gamma * acc) * nonterminal[s]
                    d = abs(q - Psi[s, a])
                    if d > residual:
                        residual = d
                    Psi[s, a] = q
            if residual <= tol:
                break
        return Psi, it, residual


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------


def _prep(params, layout, X, masks):
    X = np.ascontiguousarray(X, dtype=np.float64)
    if masks is None:
        masks = _EMPTY_MASK
    else:
        masks = np.ascontiguousarray(masks, dtype=np.float64)
    return np.ascontiguousarray(params), layout, X, masks


def mlp_forward(params, layout, X, masks=None, *, numba_path=None):
    args = _prep(params, layout, X, masks)
    if USE_NUMBA if numba_path is None else numba_path:
        return mlp_forward_nb(*args)
    return mlp_forward_np(*args)


def mlp_backward(params, layout, X, masks, dout, *, numba_path=None):
    args = _prep(params, layout, X, masks)
    dout = np.ascontiguousarray(dout, dtype=np.float64)
    if USE_NUMBA if numba_path is None else numba_path:
        return mlp_backward_nb(*args, dout)
    return mlp_backward_np(*args, dout)


def value_iteration(P, R, gamma, nonterminal, tol, max_iter, *, numba_path=None):
    args = (np.ascontiguousarray(P, dtype=np.float64), np.ascontiguousarray(R, dtype=np.float64),
            float(gamma), np.ascontiguousarray(nonterminal, dtype=np.float64), float(tol), int(max_iter))
    if USE_NUMBA if numba_path is None else numba_path:
        return value_iteration_nb(*args)
    return value_iteration_np(*args)


def soft_value_iteration(P, base, gamma, nonterminal, tol, max_iter, *, numba_path=None):
    args = (np.ascontiguousarray(P, dtype=np.float64), np.ascontiguousarray(base, dtype=np.float64),
            float(gamma), np.ascontiguousarray(nonterminal, dtype=np.float64), float(tol), int(max_iter))
    if USE_NUMBA if numba_path is None else numba_path:
        return soft_value_iteration_nb(*args)
    return soft_value_iteration_np(*args)
