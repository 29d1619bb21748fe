"""A state space recurrence run two ways, then read out through another sequence.

Run: python demos/01_scan_vs_kernel.py
"""
import torch

from medvsr.ssm import cross_scan, discretize, scan_kernel, ssm_kernel_apply, ssm_scan

torch.set_default_dtype(torch.float64)
torch.manual_seed(0)

print("== 1. discretize a small time-invariant system ==")
D, N, L = 3, 4, 12
A = -torch.tensor([0.5, 1.0, 2.0])
B = torch.randn(N)
delta = torch.full((D,), 0.1)
Abar, Bbar = discretize(A, B, delta, exact=True)
print("   Abar:", Abar.numpy().round(4))
print("   Bbar shape:", tuple(Bbar.shape))

print("== 2. sequential scan vs causal convolution ==")
C = torch.randn(N)
x = torch.randn(L, D)
y_scan = ssm_scan(Abar.expand(L, D), Bbar.expand(L, D, N), C.expand(L, N), x)
y_conv = ssm_kernel_apply(Abar, Bbar, C, x)
print("   first kernel taps (channel 0):", scan_kernel(Abar, Bbar, C, 5)[:, 0].numpy().round(4))
print("   max |scan - conv| =", (y_scan - y_conv).abs().max().item())

print("== 3. an impulse shows the kernel directly ==")
impulse = torch.zeros(L, D)
impulse[0] = 1
resp = ssm_kernel_apply(Abar, Bbar, C, impulse)
print("   impulse response, channel 2:", resp[:6, 2].numpy().round(4))

print("== 4. cross scan: near trajectory, far read-out ==")
# token-varying parameters from the near sequence; C from a different sequence
Abar_t = torch.rand(L, D) * 0.9
Bbar_t = torch.randn(L, D, N)
C_far = torch.randn(L, N)
y = cross_scan(x, Bbar_t, Abar_t, C_far)
print("   output shape:", tuple(y.shape))
print("   C_far = 0 gives all zeros:", bool((cross_scan(x, Bbar_t, Abar_t, 0 * C_far) == 0).all()))
