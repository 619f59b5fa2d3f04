import itertools

import numpy as np
import pytest

from flipad.linop import ConvSpec

EXAMPLE1_KERNEL = np.array([[0.0, 1.0], [2.0, 3.0]])
EXAMPLE1_Z = np.array([[0.0, 1.0], [2.0, 3.0]])
EXAMPLE1_X = np.array([[0.0, 0.0, 1.0], [0.0, 4.0, 6.0], [4.0, 12.0, 9.0]])


@pytest.fixture
def example1_spec():
    return ConvSpec(EXAMPLE1_KERNEL.reshape(1, 1, 2, 2), transposed=True)


def brute_conv(kernel, x, stride, padding, dilation):
    """Nested-loop cross-correlation, kernel (O, C, kh, kw), x (C, H, W)."""
    O, C, kh, kw = kernel.shape
    _, H, W = x.shape
    (sh, sw), (ph, pw), (dh, dw) = stride, padding, dilation
    Ho = (H + 2 * ph - dh * (kh - 1) - 1) // sh + 1
    Wo = (W + 2 * pw - dw * (kw - 1) - 1) // sw + 1
    out = np.zeros((O, Ho, Wo))
    for o, i, j, c, a, b in itertools.product(range(O), range(Ho), range(Wo), range(C), range(kh), range(kw)):
        r = i * sh + a * dh - ph
        s = j * sw + b * dw - pw
        if 0 <= r < H and 0 <= s < W:
            out[o, i, j] += kernel[o, c, a, b] * x[c, r, s]
    return out


def brute_conv_transpose(kernel, z, stride, padding, dilation, output_padding=(0, 0)):
    """Scatter definition of the transposed conv, kernel (C_in, C_out, kh, kw)."""
    C, O, kh, kw = kernel.shape
    _, H, W = z.shape
    (sh, sw), (ph, pw), (dh, dw) = stride, padding, dilation
    Ho = (H - 1) * sh - 2 * ph + dh * (kh - 1) + 1 + output_padding[0]
    Wo = (W - 1) * sw - 2 * pw + dw * (kw - 1) + 1 + output_padding[1]
    out = np.zeros((O, Ho, Wo))
    for c, i, j, o, a, b in itertools.product(range(C), range(H), range(W), range(O), range(kh), range(kw)):
        r = i * sh + a * dh - ph
        s = j * sw + b * dw - pw
        if 0 <= r < Ho and 0 <= s < Wo:
            out[o, r, s] += kernel[c, o, a, b] * z[c, i, j]
    return out


def random_spec(rng, transposed=None, max_ch=4):
    """Random spec and a compatible input shape drawn from the test grid."""
    if transposed is None:
        transposed = bool(rng.integers(2))
    cin, cout = rng.integers(1, max_ch + 1, size=2)
    kh, kw = rng.integers(1, 4, size=2)
    s = int(rng.choice([1, 2]))
    p = int(rng.choice([0, 1]))
    d = int(rng.choice([1, 2]))
    shape = (cin, cout, kh, kw) if transposed else (cout, cin, kh, kw)
    kernel = rng.standard_normal(shape)
    spec = ConvSpec(kernel, stride=(s, s), padding=(p, p), dilation=(d, d), transposed=transposed)
    while True:
        h, w = rng.integers(2, 8, size=2)
        try:
            spec.output_shape((int(cin), int(h), int(w)))
            return spec, (int(cin), int(h), int(w))
        except Exception:
            continue


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
