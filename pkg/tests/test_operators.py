"""Analysis operators, global application, and the binary container.

The forward/adjoint oracles here are deliberately naive: per-pixel Python
loops with an independent mirror-reflection routine, so any indexing slip in
the vectorized implementation shows up as a mismatch.
"""

from __future__ import annotations

import struct

import numpy as np
import pytest

from guideddepth.operators import (
    AnalysisOperator,
    CoefficientStack,
    OperatorFormatError,
    OperatorPair,
    analyze_patch,
    apply_global,
    apply_global_adjoint,
    cosupport,
    cosupport_dependency,
    load_pair,
    patch_matrix,
    save_pair,
)


def reflect(i: int, n: int) -> int:
    # Mirror without repeating the edge sample: -1 -> 1, n -> n - 2.
    while i < 0 or i >= n:
        i = -i if i < 0 else 2 * n - 2 - i
    return i


def naive_patch(image, r, c, side):
    h, w = image.shape
    lo = -(side // 2)
    hi = side - 1 - side // 2
    vals = []
    for dc in range(lo, hi + 1):  # column-major: columns vary slowest
        for dr in range(lo, hi + 1):
            vals.append(image[reflect(r + dr, h), reflect(c + dc, w)])
    return np.array(vals)


def naive_forward(rows, image):
    side = int(np.sqrt(rows.shape[1]))
    h, w = image.shape
    out = np.zeros((h, w, rows.shape[0]))
    for r in range(h):
        for c in range(w):
            out[r, c] = rows @ naive_patch(image, r, c, side)
    return out


def unit_rows(matrix):
    matrix = np.asarray(matrix, dtype=np.float64)
    return matrix / np.linalg.norm(matrix, axis=1, keepdims=True)


def probe_operator():
    """Fixed 10 x 9 operator: center tap, two first differences, sine rows."""
    rows = np.zeros((10, 9))
    rows[0, 4] = 1.0
    rows[1, 4], rows[1, 7] = -1.0, 1.0
    rows[2, 4], rows[2, 5] = -1.0, 1.0
    for j in range(3, 10):
        rows[j] = np.sin(np.arange(9) * (j + 1.0))
    return AnalysisOperator(unit_rows(rows))


RAMP_IMAGE = np.arange(20.0).reshape(4, 5) / 20.0
HADAMARD4 = np.array(
    [[1, 1, 1, 1], [1, -1, 1, -1], [1, 1, -1, -1], [1, -1, -1, 1]], dtype=float
) / 2.0


def random_operator(rng, k, n):
    return AnalysisOperator(unit_rows(rng.standard_normal((k, n))))


class TestAnalysisOperator:
    def test_validates_row_norms(self):
        with pytest.raises(ValueError, match="unit norm"):
            AnalysisOperator(np.ones((4, 4)))

    def test_rejects_wide_operators(self):
        with pytest.raises(ValueError, match="k >= n"):
            AnalysisOperator(unit_rows(np.random.default_rng(0).standard_normal((3, 4))))

    def test_rejects_non_square_patch_dim(self):
        with pytest.raises(ValueError, match="perfect square"):
            AnalysisOperator(unit_rows(np.random.default_rng(0).standard_normal((8, 6))))

    def test_rows_are_immutable_copies(self):
        source = unit_rows(np.random.default_rng(1).standard_normal((5, 4)))
        op = AnalysisOperator(source)
        source[0, 0] = 99.0
        assert op.rows[0, 0] != 99.0
        with pytest.raises(ValueError):
            op.rows[0, 0] = 0.0

    def test_dimensions(self):
        op = probe_operator()
        assert (op.k, op.n, op.patch_side) == (10, 9, 3)


class TestPairValidation:
    def test_mismatched_row_counts_rejected(self):
        rng = np.random.default_rng(2)
        with pytest.raises(ValueError, match="row count"):
            OperatorPair(random_operator(rng, 6, 4), random_operator(rng, 5, 4), 10.0)

    def test_non_positive_nu_rejected(self):
        rng = np.random.default_rng(3)
        ops = random_operator(rng, 6, 4), random_operator(rng, 6, 4)
        with pytest.raises(ValueError, match="nu"):
            OperatorPair(*ops, 0.0)
        with pytest.raises(ValueError, match="nu"):
            OperatorPair(*ops, float("nan"))


class TestAnalyzePatch:
    def test_hadamard_example(self):
        op = AnalysisOperator(HADAMARD4)
        coeffs = analyze_patch(op, np.array([0.1, 0.2, 0.3, 0.4]))
        np.testing.assert_allclose(coeffs, [0.5, -0.1, -0.2, 0.0], atol=1e-15)

    def test_wrong_length_rejected(self):
        with pytest.raises(ValueError, match="shape"):
            analyze_patch(AnalysisOperator(HADAMARD4), np.zeros(9))


class TestCosupport:
    def test_exact_zeros(self):
        cs = cosupport(np.array([0.0, 1.0, 0.0]))
        assert cs.indices == frozenset({0, 2})
        assert cs.tolerance == 0.0

    def test_tolerance_widens_the_set(self):
        coeffs = np.array([0.5, -0.1, -0.2, 0.0])
        assert cosupport(coeffs, 0.05).indices == frozenset({3})
        assert cosupport(coeffs, 0.15).indices == frozenset({1, 3})

    def test_negative_tolerance_rejected(self):
        with pytest.raises(ValueError):
            cosupport(np.zeros(3), -1.0)


class TestCosupportDependency:
    def test_identical_stacks_are_fully_coupled(self):
        a = np.array([0, 0, 0, 1, 1, 1, 1, 1, 1, 1], dtype=float)
        conditional, unconditional = cosupport_dependency(a, a.copy(), percentile=30)
        assert conditional == 1.0
        assert unconditional == pytest.approx(0.3)

    def test_disjoint_smalls_are_anti_coupled(self):
        a = np.array([0, 0, 0, 1, 1, 1, 1, 1, 1, 1], dtype=float)
        b = np.array([1, 1, 1, 0, 0, 0, 1, 1, 1, 1], dtype=float)
        conditional, unconditional = cosupport_dependency(a, b, percentile=30)
        assert conditional == 0.0
        assert unconditional == pytest.approx(0.3)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError, match="shape"):
            cosupport_dependency(np.zeros(4), np.zeros(5))


class TestPatchMatrix:
    def test_frozen_boundary_probes(self):
        patches = patch_matrix(RAMP_IMAGE, 3)
        np.testing.assert_allclose(
            patches[0, 0],
            [0.3, 0.05, 0.3, 0.25, 0.0, 0.25, 0.3, 0.05, 0.3],
        )
        np.testing.assert_allclose(
            patches[2, 2],
            [0.3, 0.55, 0.8, 0.35, 0.6, 0.85, 0.4, 0.65, 0.9],
        )
        np.testing.assert_allclose(
            patches[3, 4],
            [0.65, 0.9, 0.65, 0.7, 0.95, 0.7, 0.65, 0.9, 0.65],
        )

    @pytest.mark.parametrize("side", [2, 3, 4, 5])
    def test_matches_naive_loop_everywhere(self, side):
        rng = np.random.default_rng(side)
        image = rng.standard_normal((7, 6))
        patches = patch_matrix(image, side)
        assert patches.shape == (7, 6, side * side)
        for r in range(7):
            for c in range(6):
                np.testing.assert_array_equal(
                    patches[r, c], naive_patch(image, r, c, side)
                )

    def test_image_smaller_than_patch_rejected(self):
        with pytest.raises(ValueError, match="smaller"):
            patch_matrix(np.zeros((2, 9)), 3)


class TestApplyGlobal:
    def test_frozen_probes_on_ramp(self):
        coeffs = apply_global(probe_operator(), RAMP_IMAGE).values
        np.testing.assert_allclose(
            coeffs[0, 0, :3], [0.0, 0.035355339059327376, 0.17677669529663687]
        )
        np.testing.assert_allclose(
            coeffs[2, 3, :3], [0.65, 0.035355339059327306, 0.17677669529663687]
        )
        np.testing.assert_allclose(
            coeffs[3, 4, :3], [0.95, -0.035355339059327306, -0.17677669529663687]
        )

    def test_matches_naive_forward(self):
        rng = np.random.default_rng(7)
        op = random_operator(rng, 12, 9)
        image = rng.standard_normal((9, 8))
        got = apply_global(op, image).values
        np.testing.assert_allclose(got, naive_forward(op.rows, image), atol=1e-13)

    def test_even_patch_side(self):
        rng = np.random.default_rng(8)
        op = random_operator(rng, 5, 4)
        image = rng.standard_normal((6, 7))
        got = apply_global(op, image).values
        np.testing.assert_allclose(got, naive_forward(op.rows, image), atol=1e-13)

    def test_linear_in_the_image(self):
        rng = np.random.default_rng(9)
        op = random_operator(rng, 10, 9)
        x, y = rng.standard_normal((2, 6, 6))
        combo = apply_global(op, 2.0 * x - 3.0 * y).values
        parts = 2.0 * apply_global(op, x).values - 3.0 * apply_global(op, y).values
        np.testing.assert_allclose(combo, parts, atol=1e-12)

    def test_interior_pixel_sees_plain_patch(self):
        rng = np.random.default_rng(10)
        op = random_operator(rng, 9, 9)
        image = rng.standard_normal((8, 8))
        direct = op.rows @ image[3:6, 2:5].flatten(order="F")
        np.testing.assert_allclose(apply_global(op, image).values[4, 3], direct)


class TestAdjoint:
    def explicit_matrix(self, op, h, w):
        """Forward operator as a dense matrix, built column by column."""
        cols = []
        for i in range(h * w):
            basis = np.zeros(h * w)
            basis[i] = 1.0
            cols.append(apply_global(op, basis.reshape(h, w)).values.ravel())
        return np.column_stack(cols)

    def test_equals_transpose_of_forward_matrix(self):
        rng = np.random.default_rng(11)
        op = random_operator(rng, 6, 4)
        h, w = 5, 6
        a = self.explicit_matrix(op, h, w)
        y = rng.standard_normal((h, w, op.k))
        expected = (a.T @ y.ravel()).reshape(h, w)
        got = apply_global_adjoint(op, CoefficientStack(y))
        np.testing.assert_allclose(got, expected, atol=1e-12)

    @pytest.mark.parametrize("shape,k,n", [((7, 9), 12, 9), ((6, 6), 5, 4), ((10, 7), 25, 25)])
    def test_inner_product_identity(self, shape, k, n):
        rng = np.random.default_rng(k)
        op = random_operator(rng, k, n)
        x = rng.standard_normal(shape)
        y = rng.standard_normal(shape + (k,))
        lhs = float(np.sum(apply_global(op, x).values * y))
        rhs = float(np.sum(x * apply_global_adjoint(op, CoefficientStack(y))))
        assert abs(lhs - rhs) <= 1e-10 * max(1.0, abs(lhs))

    def test_k_mismatch_rejected(self):
        rng = np.random.default_rng(12)
        op = random_operator(rng, 6, 4)
        with pytest.raises(ValueError, match="rows"):
            apply_global_adjoint(op, CoefficientStack(np.zeros((5, 5, 7))))


class TestContainer:
    def make_pair(self, seed=13, k=6, n=4):
        rng = np.random.default_rng(seed)
        return OperatorPair(
            random_operator(rng, k, n), random_operator(rng, k, n), 10.0
        )

    def test_round_trip_is_bit_exact(self, tmp_path):
        pair = self.make_pair()
        path = tmp_path / "pair.jido"
        save_pair(pair, path)
        loaded = load_pair(path)
        assert loaded.intensity.rows.tobytes() == pair.intensity.rows.tobytes()
        assert loaded.depth.rows.tobytes() == pair.depth.rows.tobytes()
        assert loaded.nu == pair.nu

    def test_header_layout(self, tmp_path):
        pair = self.make_pair(k=6, n=4)
        path = tmp_path / "pair.jido"
        save_pair(pair, path)
        data = path.read_bytes()
        magic, version, k, n_i, n_d, nu = struct.unpack_from("<4sIIIId", data)
        assert magic == b"JIDO" and version == 1
        assert (k, n_i, n_d) == (6, 4, 4)
        assert nu == 10.0
        assert len(data) == 28 + 8 * k * (n_i + n_d)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "pair.jido"
        save_pair(self.make_pair(), path)
        data = bytearray(path.read_bytes())
        data[:4] = b"NOPE"
        path.write_bytes(bytes(data))
        with pytest.raises(OperatorFormatError, match="magic"):
            load_pair(path)

    def test_unknown_version_rejected(self, tmp_path):
        path = tmp_path / "pair.jido"
        save_pair(self.make_pair(), path)
        data = bytearray(path.read_bytes())
        data[4] = 2
        path.write_bytes(bytes(data))
        with pytest.raises(OperatorFormatError, match="version"):
            load_pair(path)

    def test_truncated_body_rejected(self, tmp_path):
        path = tmp_path / "pair.jido"
        save_pair(self.make_pair(), path)
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(OperatorFormatError, match="bytes"):
            load_pair(path)

    def test_truncated_header_rejected(self, tmp_path):
        path = tmp_path / "pair.jido"
        path.write_bytes(b"JID")
        with pytest.raises(OperatorFormatError, match="header"):
            load_pair(path)

    def test_denormalized_rows_rejected(self, tmp_path):
        path = tmp_path / "pair.jido"
        save_pair(self.make_pair(), path)
        data = bytearray(path.read_bytes())
        # Scale the first stored row of the intensity operator by 2.
        header = struct.calcsize("<4sIIIId")
        row = np.frombuffer(bytes(data[header:header + 32]), "<f8") * 2.0
        data[header:header + 32] = row.tobytes()
        path.write_bytes(bytes(data))
        with pytest.raises(OperatorFormatError, match="row norms"):
            load_pair(path)
