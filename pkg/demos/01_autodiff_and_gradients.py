"""Walk through the tensor engine: build a small expression graph, run the
backward pass, and corroborate every gradient with central finite
differences."""

import numpy as np

from prefixmerge import autodiff as ad

rng = np.random.default_rng(0)

print("=== a tiny expression graph ===")
x = ad.Tensor(rng.normal(size=(3, 4)), requires_grad=True)
w = ad.Tensor(rng.normal(size=(4, 2)), requires_grad=True)
b = ad.Tensor(np.zeros(2), requires_grad=True)

y = ad.gelu(ad.linear(x, w, b))
loss = ad.sum_all(ad.mul(y, y))
print(f"loss = {loss.item():.6f}")

grads = ad.backward(loss)
print(f"gradient entries: {len(grads)} (x, w, b)")

print("\n=== checking against the finite-difference oracle ===")
for name, p in (("x", x), ("w", w), ("b", b)):
    def f(_t):
        out = ad.gelu(ad.linear(x, w, b))
        return ad.sum_all(ad.mul(out, out))

    fd = ad.finite_diff_grad(f, p, eps=1e-6)
    err = np.abs(grads.get(p) - fd).max()
    print(f"  d loss / d {name}: max |backward - central diff| = {err:.2e}")

print("\n=== softmax + cross entropy ===")
logits = ad.Tensor(rng.normal(size=(4, 6)) * 2, requires_grad=True)
targets = [1, 4, 0, 3]
probs = ad.softmax(logits, axis=1)
print(f"softmax row sums: {probs.data.sum(axis=1)}")
ce = ad.cross_entropy(logits, targets)
print(f"cross entropy: {ce.item():.6f} (uniform would be ln 6 = "
      f"{np.log(6):.6f})")
g = ad.backward(ce).get(logits)
print(f"gradient rows sum to ~0 (softmax minus one-hot): "
      f"{np.abs(g.sum(axis=1)).max():.2e}")
