"""Selective scan semantics, scan-implementation equivalence, block behavior."""

import math

import numpy as np
import pytest

from bmace import mamba as mb
from bmace import numerics as nm
from bmace.gradcheck import REL_TOLERANCE, check_gradients


def t64(values):
    return nm.tensor(values, dtype=nm.HIGH)


def random_scan_instance(rng, L, d, n):
    u = t64(rng.standard_normal((L, d)))
    delta = t64(rng.uniform(0.01, 1.5, size=(L, d)))
    B = t64(rng.standard_normal((L, n)))
    C = t64(rng.standard_normal((L, n)))
    A = t64(-rng.uniform(0.1, 3.0, size=(d, n)))
    D = t64(rng.standard_normal(d))
    return mb.ScanInputs(u=u, delta=delta, B=B, C=C), A, D


def random_block_params(rng, d_model, d_inner, n, r, k, scale=0.4):
    def u(shape):
        return t64(rng.uniform(-scale, scale, size=shape))

    return mb.MambaBlockParams(
        in_proj=u((d_model, 2 * d_inner)),
        conv_w=u((d_inner, k)),
        conv_b=u((d_inner,)),
        x_proj=u((d_inner, r + 2 * n)),
        dt_proj=u((r, d_inner)),
        dt_bias=u((d_inner,)),
        A_log=t64(rng.uniform(-1.0, 1.0, size=(d_inner, n))),
        D=u((d_inner,)),
        out_proj=u((d_inner, d_model)),
        norm_gain=t64(rng.uniform(0.5, 1.5, size=(d_model,))),
    )


class TestDiscretize:
    def test_known_value(self):
        delta = t64([[math.log(2.0)]])
        A = t64([[-1.0]])
        B = t64([[1.0]])
        abar, bbar = mb.discretize(delta, A, B)
        assert abar.data[0, 0, 0] == pytest.approx(0.5, abs=1e-15)
        assert bbar.data[0, 0, 0] == pytest.approx(math.log(2.0), abs=1e-15)

    def test_shapes(self):
        rng = np.random.default_rng(0)
        delta = t64(rng.uniform(0.1, 1.0, (7, 3)))
        A = t64(-rng.uniform(0.1, 2.0, (3, 4)))
        B = t64(rng.standard_normal((7, 4)))
        abar, bbar = mb.discretize(delta, A, B)
        assert abar.shape == (7, 3, 4) and bbar.shape == (7, 3, 4)

    def test_abar_in_unit_interval(self):
        rng = np.random.default_rng(1)
        for _ in range(10):
            delta = t64(rng.uniform(1e-4, 5.0, (6, 2)))
            A = t64(-np.exp(rng.uniform(-3, 2, (2, 3))))
            B = t64(rng.standard_normal((6, 3)))
            abar, _ = mb.discretize(delta, A, B)
            assert np.all(abar.data > 0.0) and np.all(abar.data < 1.0)


class TestSelectiveScan:
    def test_two_step_hand_example(self):
        # A=-1, delta=1, B=C=1, D=0, u=[1,1]:
        #   h1 = 1, y1 = 1;  h2 = e^-1 + 1, y2 = 1 + e^-1.
        s = mb.ScanInputs(u=t64([[1.0], [1.0]]), delta=t64([[1.0], [1.0]]),
                          B=t64([[1.0], [1.0]]), C=t64([[1.0], [1.0]]))
        A = t64([[-1.0]])
        D = t64([0.0])
        y = mb.selective_scan_seq(s, A, D)
        assert y.data[0, 0] == pytest.approx(1.0, abs=1e-15)
        assert y.data[1, 0] == pytest.approx(1.0 + math.exp(-1.0), abs=1e-15)

    def test_single_frame(self):
        rng = np.random.default_rng(2)
        s, A, D = random_scan_instance(rng, 1, 3, 2)
        y = mb.selective_scan_seq(s, A, D)
        # One step: h = Bbar*u, y = C.h + D*u.
        bu = (s.delta.data * s.u.data)[0][:, None] * s.B.data[0][None, :]
        want = bu @ s.C.data[0] + D.data * s.u.data[0]
        assert np.max(np.abs(y.data[0] - want)) <= 1e-14

    def test_seq_equals_assoc(self):
        lengths = [1, 2, 3, 16, 100, 512]
        rng = np.random.default_rng(3)
        for i in range(100):
            L = lengths[i % len(lengths)]
            d = int(rng.integers(1, 6))
            n = int(rng.integers(1, 5))
            s, A, D = random_scan_instance(rng, L, d, n)
            y_seq = mb.selective_scan_seq(s, A, D)
            y_assoc = mb.selective_scan_assoc(s, A, D)
            assert np.max(np.abs(y_seq.data - y_assoc.data)) <= 1e-10, f"instance {i} (L={L})"

    def test_prefix_sum_reduction_when_a_is_zero(self):
        # With A = 0, Abar = 1 and the scan is a running sum; check against
        # an independent cumulative-sum oracle.
        rng = np.random.default_rng(4)
        for _ in range(10):
            L, d, n = int(rng.integers(2, 40)), int(rng.integers(1, 5)), int(rng.integers(1, 4))
            s, _, D = random_scan_instance(rng, L, d, n)
            A0 = nm.zeros((d, n))
            y = mb.selective_scan_seq(s, A0, D)
            du = s.delta.data * s.u.data
            prefix = np.cumsum(du[:, :, None] * s.B.data[:, None, :], axis=0)
            want = np.einsum("tdn,tn->td", prefix, s.C.data) + D.data[None, :] * s.u.data
            assert np.max(np.abs(y.data - want)) <= 1e-10

    def test_bounded_state(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            L, d, n = int(rng.integers(2, 60)), int(rng.integers(1, 5)), int(rng.integers(1, 5))
            s, A, _ = random_scan_instance(rng, L, d, n)
            abar, bbar = mb.discretize(s.delta, A, s.B)
            assert np.all(abar.data > 0.0) and np.all(abar.data < 1.0)
            b_seq = bbar.data * s.u.data[:, :, None]
            h = mb.linear_recurrence(abar.data, b_seq, impl="seq")
            bound = np.max(np.abs(b_seq)) / (1.0 - abar.data.max())
            assert np.max(np.abs(h)) <= bound + 1e-12

    def test_work_linearity(self):
        rng = np.random.default_rng(6)
        counts = {}
        for L in (4, 8, 64, 128):
            s, A, D = random_scan_instance(rng, L, 3, 2)
            counter = mb.OpCounter()
            mb.selective_scan_seq(s, A, D, counter=counter)
            counts[L] = counter.total
        assert counts[8] == 2 * counts[4]
        assert counts[128] == 2 * counts[64]

    def test_delta_must_be_positive(self):
        with pytest.raises(ValueError):
            mb.ScanInputs(u=t64([[1.0]]), delta=t64([[0.0]]),
                          B=t64([[1.0]]), C=t64([[1.0]]))

    def test_scan_gradients(self):
        rng = np.random.default_rng(7)
        for seed in range(10):
            inst_rng = np.random.default_rng(700 + seed)
            L, d, n = int(inst_rng.integers(1, 7)), int(inst_rng.integers(1, 4)), int(inst_rng.integers(1, 4))
            s, A, D = random_scan_instance(inst_rng, L, d, n)
            probe = t64(rng.standard_normal((L, d)))

            def loss(ps):
                u, delta, B, C, A_, D_ = ps
                out = mb.selective_scan_seq(mb.ScanInputs(u=u, delta=delta, B=B, C=C), A_, D_)
                return nm.sum_all(nm.mul(out, probe))

            err = check_gradients(loss, [s.u, s.delta, s.B, s.C, A, D])
            assert err <= REL_TOLERANCE, f"seed {seed}: rel err {err:.2e}"

    def test_assoc_scan_gradients_match_seq(self):
        rng = np.random.default_rng(8)
        s, A, D = random_scan_instance(rng, 12, 3, 2)
        probe = t64(rng.standard_normal((12, 3)))
        params = [s.u, s.delta, s.B, s.C, A, D]

        def loss_with(scan_fn):
            def loss():
                out = scan_fn(mb.ScanInputs(u=params[0], delta=params[1],
                                            B=params[2], C=params[3]), params[4], params[5])
                return nm.sum_all(nm.mul(out, probe))
            return loss

        g_seq = nm.grad(loss_with(mb.selective_scan_seq), params)
        g_assoc = nm.grad(loss_with(mb.selective_scan_assoc), params)
        for gs, ga in zip(g_seq, g_assoc):
            assert np.max(np.abs(gs.data - ga.data)) <= 1e-10


class TestMambaBlock:
    TINY = dict(d_model=4, d_inner=8, n=2, r=2, k=2)

    def test_shape_preserved(self):
        rng = np.random.default_rng(10)
        p = random_block_params(rng, **self.TINY)
        x = t64(rng.standard_normal((5, 4)))
        assert mb.mamba_block(x, p).shape == (5, 4)

    def test_zero_parameters_give_zero_output(self):
        # With in_proj = 0 the gate is silu(0) = 0 and annihilates everything.
        z = self.TINY
        p = mb.MambaBlockParams(
            in_proj=nm.zeros((z["d_model"], 2 * z["d_inner"])),
            conv_w=nm.zeros((z["d_inner"], z["k"])),
            conv_b=nm.zeros(z["d_inner"]),
            x_proj=nm.zeros((z["d_inner"], z["r"] + 2 * z["n"])),
            dt_proj=nm.zeros((z["r"], z["d_inner"])),
            dt_bias=nm.zeros(z["d_inner"]),
            A_log=nm.zeros((z["d_inner"], z["n"])),
            D=nm.zeros(z["d_inner"]),
            out_proj=nm.zeros((z["d_inner"], z["d_model"])),
            norm_gain=nm.ones(z["d_model"]),
        )
        rng = np.random.default_rng(11)
        y = mb.mamba_block(t64(rng.standard_normal((6, 4))), p)
        assert np.array_equal(y.data, np.zeros((6, 4)))

    def test_backward_is_conjugated_forward(self):
        rng = np.random.default_rng(12)
        p = random_block_params(rng, **self.TINY)
        x = t64(rng.standard_normal((9, 4)))
        back = mb.mamba_block(x, p, direction=mb.BACKWARD)
        conj = nm.reverse_time(mb.mamba_block(nm.reverse_time(x), p, direction=mb.FORWARD))
        assert np.array_equal(back.data, conj.data)

    def test_backward_direction_differs_from_forward(self):
        rng = np.random.default_rng(13)
        p = random_block_params(rng, **self.TINY)
        x = t64(rng.standard_normal((9, 4)))
        fwd = mb.mamba_block(x, p, direction=mb.FORWARD)
        back = mb.mamba_block(x, p, direction=mb.BACKWARD)
        assert np.max(np.abs(fwd.data - back.data)) > 1e-8

    def test_seq_and_assoc_block_agree(self):
        rng = np.random.default_rng(14)
        p = random_block_params(rng, **self.TINY)
        x = t64(rng.standard_normal((130, 4)))
        y1 = mb.mamba_block(x, p, scan_impl="seq")
        y2 = mb.mamba_block(x, p, scan_impl="assoc")
        assert np.max(np.abs(y1.data - y2.data)) <= 1e-10

    def test_block_gradients_both_directions(self):
        for direction in (mb.FORWARD, mb.BACKWARD):
            rng = np.random.default_rng(15)
            p = random_block_params(rng, d_model=4, d_inner=8, n=2, r=2, k=2)
            x = t64(rng.standard_normal((5, 4)))
            probe = t64(rng.standard_normal((5, 4)))
            names = [n for n, _ in p.named_tensors()]
            tensors = [t for _, t in p.named_tensors()]

            def loss(ps):
                fields = dict(zip(names, ps[:-1]))
                y = mb.mamba_block(ps[-1], mb.MambaBlockParams(**fields), direction=direction)
                return nm.sum_all(nm.mul(y, probe))

            err = check_gradients(loss, tensors + [x])
            assert err <= REL_TOLERANCE, f"{direction}: rel err {err:.2e}"

    def test_gradient_reaches_every_parameter(self):
        rng = np.random.default_rng(16)
        p = random_block_params(rng, **self.TINY)
        x = t64(rng.standard_normal((7, 4)))
        tensors = [t for _, t in p.named_tensors()]
        grads = nm.grad(lambda: nm.sum_all(mb.mamba_block(x, p)), tensors)
        for (name, _), g in zip(p.named_tensors(), grads):
            assert np.any(g.data != 0.0), f"no gradient reached {name}"
