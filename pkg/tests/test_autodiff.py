import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from darkforge import autodiff as ad
from darkforge.autodiff import (
    Tensor,
    grad_check,
    grad_of,
    no_grad,
    read_checkpoint,
    write_checkpoint,
)
from darkforge.errors import ShapeError


class TestElementwise:
    def test_add(self):
        out = ad.add(Tensor([1.0, 2.0]), Tensor([3.0, 4.0]))
        assert out.data.tolist() == [4.0, 6.0]

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            ad.add(Tensor([1.0]), Tensor([1.0, 2.0]))
        with pytest.raises(ShapeError):
            ad.mul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 2))))

    def test_abs_backward_sign(self):
        x = Tensor([-2.0], requires_grad=True)
        ad.reduce_sum(ad.absolute(x)).backward()
        assert x.grad.tolist() == [-1.0]

    def test_abs_subgradient_zero_at_zero(self):
        x = Tensor([0.0], requires_grad=True)
        ad.reduce_sum(ad.absolute(x)).backward()
        assert x.grad.tolist() == [0.0]

    def test_square_gradient(self):
        x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
        ad.reduce_sum(ad.square(x)).backward()
        assert x.grad.tolist() == [2.0, 4.0, 6.0]

    def test_scale_and_neg(self):
        x = Tensor([1.0, -2.0], requires_grad=True)
        out = ad.scale(ad.neg(x), 3.0)
        assert out.data.tolist() == [-3.0, 6.0]
        ad.reduce_sum(out).backward()
        assert x.grad.tolist() == [-3.0, -3.0]


class TestReduce:
    def test_mean_value(self):
        assert float(ad.reduce_mean(Tensor([2.0, 4.0])).data) == 3.0

    def test_mean_gradient_uniform(self):
        x = Tensor(np.zeros(5), requires_grad=True)
        ad.reduce_mean(x).backward()
        assert np.allclose(x.grad, 0.2)

    def test_mean_of_ones_exact(self):
        assert float(ad.reduce_mean(Tensor(np.ones((512, 512)))).data) == 1.0

    def test_empty_rejected(self):
        with pytest.raises(ShapeError):
            ad.reduce_mean(Tensor(np.zeros((0,))))


class TestBackward:
    def test_sum_gives_ones(self):
        w = Tensor(np.arange(4.0), requires_grad=True)
        ad.reduce_sum(w).backward()
        assert np.array_equal(w.grad, np.ones(4))

    def test_square_sum(self):
        w = Tensor([3.0], requires_grad=True)
        ad.reduce_sum(ad.mul(w, w)).backward()
        assert w.grad.tolist() == [6.0]

    def test_accumulation_doubles(self):
        w = Tensor([3.0], requires_grad=True)
        for _ in range(2):
            ad.reduce_sum(ad.mul(w, w)).backward()
        assert w.grad.tolist() == [12.0]

    def test_non_scalar_rejected(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(ShapeError):
            ad.add(x, x).backward()

    def test_unreached_grad_stays_zero(self):
        x = Tensor([1.0], requires_grad=True)
        y = Tensor([1.0], requires_grad=True)
        ad.reduce_sum(ad.square(x)).backward()
        assert np.array_equal(grad_of(y), np.zeros(1))

    def test_diamond_graph_accumulates_once(self):
        # z = x*x + x*x reaches x along two paths
        x = Tensor([2.0], requires_grad=True)
        z = ad.add(ad.mul(x, x), ad.mul(x, x))
        ad.reduce_sum(z).backward()
        assert x.grad.tolist() == [8.0]

    def test_no_grad_blocks_recording(self):
        x = Tensor([1.0], requires_grad=True)
        with no_grad():
            out = ad.square(x)
        assert not out.requires_grad and out._parents == ()

    def test_strict_checks_flag(self):
        with np.errstate(over="ignore"):
            with pytest.raises(FloatingPointError):
                ad.square(Tensor([1e200]))  # overflows to inf


class TestGradCheck:
    def test_linear_tiny_error(self):
        err = grad_check(ad.reduce_sum, Tensor(np.random.default_rng(0).standard_normal(9)))
        assert err < 1e-10

    def test_quadratic(self):
        x = Tensor(np.random.default_rng(1).standard_normal(11))
        assert grad_check(lambda t: ad.reduce_sum(ad.square(t)), x) < 1e-6

    def test_non_scalar_rejected(self):
        with pytest.raises(ShapeError):
            grad_check(lambda t: ad.square(t), Tensor([1.0, 2.0]))

    @settings(max_examples=20)
    @given(st.integers(0, 10_000))
    def test_order_independence(self, seed):
        # two algebraically identical graphs built in different op order
        rng = np.random.default_rng(seed)
        vals = rng.standard_normal(6)
        a = Tensor(vals, requires_grad=True)
        ad.reduce_sum(ad.add(ad.square(a), ad.scale(a, 2.0))).backward()
        b = Tensor(vals, requires_grad=True)
        ad.reduce_sum(ad.add(ad.scale(b, 2.0), ad.square(b))).backward()
        assert np.allclose(a.grad, b.grad, atol=1e-12)


class TestCheckpoint:
    def test_roundtrip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(7)
        tensors = {
            "a.weight": rng.standard_normal((3, 4, 5)),
            "a.bias": rng.standard_normal(3),
            "scalarish": rng.standard_normal(()),
        }
        write_checkpoint(tmp_path / "t.dfck", tensors)
        back = read_checkpoint(tmp_path / "t.dfck")
        assert list(back) == list(tensors)
        for name in tensors:
            assert np.array_equal(back[name], np.asarray(tensors[name]))

    def test_magic_guard(self, tmp_path):
        (tmp_path / "bad.dfck").write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(ValueError, match="magic"):
            read_checkpoint(tmp_path / "bad.dfck")

    def test_tensor_values_accepted(self, tmp_path):
        write_checkpoint(tmp_path / "t.dfck", {"x": Tensor([1.0, 2.0])})
        assert read_checkpoint(tmp_path / "t.dfck")["x"].tolist() == [1.0, 2.0]
