import numpy as np
import pytest

from chiefray.errors import MissingCodeError, StackMismatchError
from chiefray.graycode import (
    REASON_INCONSISTENT_BIT,
    REASON_LOW_CONTRAST,
    REASON_OK,
    DecodedMap,
    decode_stack,
    forward_lookup,
    generate_patterns,
    gray_decode,
    gray_encode,
    inverse_lookup,
)


def reflected_code_table(bits: int) -> list[int]:
    """Independent oracle: reflect-and-prefix construction of the code list."""
    codes = [0, 1]
    for b in range(1, bits):
        codes = codes + [c | (1 << b) for c in reversed(codes)]
    return codes


class TestGrayCode:
    def test_trivial_values(self):
        assert gray_encode(0) == 0
        assert gray_encode(5) == 7  # 101 xor 010 = 111

    def test_exhaustive_roundtrip_16_bits(self):
        n = np.arange(2**16)
        assert np.array_equal(gray_decode(gray_encode(n)), n)

    def test_against_reflection_construction(self):
        table = reflected_code_table(12)
        n = np.arange(2**12)
        assert np.array_equal(gray_encode(n), np.array(table))

    def test_rejects_negative(self):
        with pytest.raises(ValueError):
            gray_encode(-1)


class TestGeneratePatterns:
    def test_frame_counts(self):
        assert generate_patterns(8, 1).frame_count == 8  # 3 bits * 2 + 2
        assert generate_patterns(800, 600).frame_count == 42  # 2*(10+10)+2
        assert generate_patterns(1, 1).frame_count == 2  # references only

    def test_complement_duality(self):
        stack = generate_patterns(16, 12)
        for b in range(0, stack.frame_count - 2, 2):
            assert np.array_equal(stack.frames[b], ~stack.frames[b + 1])

    def test_msb_first_column_frames(self):
        stack = generate_patterns(8, 2)
        codes = gray_encode(np.arange(8))
        msb = ((codes >> 2) & 1).astype(bool)
        assert np.array_equal(stack.frames[0][0], msb)

    def test_reference_frames(self):
        stack = generate_patterns(4, 4)
        assert stack.frames[stack.white_index].all()
        assert not stack.frames[stack.black_index].any()


def identity_scans(stack, scale=100.0):
    return [f.astype(np.float32) * scale for f in stack.frames]


class TestDecodeStack:
    def test_exact_roundtrip(self):
        stack = generate_patterns(16, 12)
        dm = decode_stack(identity_scans(stack), stack)
        uu, vv = np.meshgrid(np.arange(16), np.arange(12))
        assert dm.valid.all()
        assert np.array_equal(dm.u, uu)
        assert np.array_equal(dm.v, vv)

    def test_degenerate_1x1(self):
        stack = generate_patterns(1, 1)
        dm = decode_stack(identity_scans(stack), stack)
        assert dm.valid.all()
        assert (dm.u == 0).all() and (dm.v == 0).all()

    def test_all_black_low_contrast(self):
        stack = generate_patterns(8, 8)
        scans = [np.zeros((8, 8), np.float32) for _ in stack.frames]
        dm = decode_stack(scans, stack)
        assert not dm.valid.any()
        assert (dm.reason == REASON_LOW_CONTRAST).all()
        assert (dm.u == -1).all()

    def test_stack_mismatch(self):
        stack = generate_patterns(8, 8)
        with pytest.raises(StackMismatchError):
            decode_stack(identity_scans(stack)[:-1], stack)

    def test_bit_flip_injection(self):
        stack = generate_patterns(16, 12)
        scans = identity_scans(stack)
        # make one bit indecisive at one pixel: equalize pos and complement
        scans[2] = scans[2].copy()
        scans[3] = scans[3].copy()
        scans[2][5, 7] = 50.0
        scans[3][5, 7] = 50.0
        dm = decode_stack(scans, stack)
        assert dm.reason[5, 7] == REASON_INCONSISTENT_BIT
        assert dm.u[5, 7] == -1
        assert dm.valid.sum() == 16 * 12 - 1

    def test_out_of_range_code_invalid(self):
        # width 6 uses 3 bits; code 7 decodes beyond the panel
        stack = generate_patterns(6, 1)
        scans = identity_scans(stack)
        target = gray_encode(7)
        for b in range(3):
            bit = (target >> (2 - b)) & 1
            scans[2 * b] = scans[2 * b].copy()
            scans[2 * b + 1] = scans[2 * b + 1].copy()
            scans[2 * b][0, 2] = 100.0 * bit
            scans[2 * b + 1][0, 2] = 100.0 * (1 - bit)
        dm = decode_stack(scans, stack)
        assert dm.reason[0, 2] == REASON_INCONSISTENT_BIT

    def test_monotone_validity(self):
        rng = np.random.default_rng(2)
        stack = generate_patterns(16, 12)
        scans = [f.astype(np.float32) * 100 + rng.uniform(0, 14, (12, 16)).astype(np.float32) for f in stack.frames]
        base = decode_stack(scans, stack, contrast_threshold=0.1, bit_threshold=0.05)
        for c, b in [(0.2, 0.05), (0.1, 0.15), (0.3, 0.3)]:
            stricter = decode_stack(scans, stack, contrast_threshold=c, bit_threshold=b)
            newly_valid = stricter.valid & ~base.valid
            assert not newly_valid.any()


def single_code_map(w=32, h=32, code=(5, 7), at=(10, 12)):
    u = np.full((h, w), -1, np.int32)
    v = np.full((h, w), -1, np.int32)
    reason = np.full((h, w), REASON_LOW_CONTRAST, np.uint8)
    u[at[1], at[0]] = code[0]
    v[at[1], at[0]] = code[1]
    reason[at[1], at[0]] = REASON_OK
    return DecodedMap(u=u, v=v, reason=reason, proj_width=16, proj_height=16)


class TestInverseLookup:
    def test_single_pixel_code(self):
        dm = single_code_map()
        assert np.allclose(inverse_lookup(dm, (5.0, 7.0)), [10.0, 12.0])

    def test_missing_code(self):
        dm = single_code_map()
        with pytest.raises(MissingCodeError):
            inverse_lookup(dm, (1.0, 1.0))

    def test_bilinear_among_four_neighbours(self):
        # exact code absent; all 4 neighbours present as single pixels
        u = np.full((32, 32), -1, np.int32)
        v = np.full((32, 32), -1, np.int32)
        reason = np.full((32, 32), REASON_LOW_CONTRAST, np.uint8)
        spots = {(4, 7): (10, 12), (6, 7): (14, 12), (5, 6): (12, 10), (5, 8): (12, 14)}
        for (cu, cv), (x, y) in spots.items():
            u[y, x] = cu
            v[y, x] = cv
            reason[y, x] = REASON_OK
        dm = DecodedMap(u=u, v=v, reason=reason, proj_width=16, proj_height=16)
        xy = inverse_lookup(dm, (5.0, 7.0))
        assert np.allclose(xy, [12.0, 12.0], atol=1e-9)

    def test_identity_map_subpixel(self):
        stack = generate_patterns(32, 24)
        dm = decode_stack(identity_scans(stack), stack)
        assert np.allclose(inverse_lookup(dm, (11.0, 9.0)), [11.0, 9.0], atol=1e-9)
        assert np.allclose(inverse_lookup(dm, (11.25, 9.5)), [11.25, 9.5], atol=1e-9)


class TestForwardLookup:
    def test_identity_map(self):
        stack = generate_patterns(32, 24)
        dm = decode_stack(identity_scans(stack), stack)
        assert np.allclose(forward_lookup(dm, (11.3, 9.7)), [11.3, 9.7], atol=1e-9)

    def test_missing(self):
        dm = single_code_map()
        with pytest.raises(MissingCodeError):
            forward_lookup(dm, (25.0, 25.0))
