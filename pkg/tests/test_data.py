import hashlib
import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nesure import data, metrics
from nesure.errors import AuditViolation, ChecksumError, ContractError, FormatError, VersionError
from nesure.operators import identity, inpaint_mask


@pytest.fixture(scope="module")
def leaves():
    return data.generate_dead_leaves(500, (1, 32, 32), 0)


class TestDeadLeaves:
    def test_empty(self):
        ds = data.generate_dead_leaves(0, (1, 8, 8), 0)
        assert len(ds) == 0 and ds.shape == (1, 8, 8)

    def test_deterministic(self):
        a = data.generate_dead_leaves(4, (3, 12, 12), 5)
        b = data.generate_dead_leaves(4, (3, 12, 12), 5)
        assert a.images.tobytes() == b.images.tobytes()

    def test_index_keyed(self):
        # image i depends only on (seed, i), so a longer run extends a shorter one
        a = data.generate_dead_leaves(2, (1, 8, 8), 5)
        b = data.generate_dead_leaves(5, (1, 8, 8), 5)
        np.testing.assert_array_equal(a.images, b.images[:2])

    def test_range_and_piecewise_constant(self, leaves):
        x = leaves.images
        assert x.min() >= 0.0 and x.max() <= 1.0
        # occlusion images are dominated by flat regions
        flat = np.mean(np.diff(x, axis=-1) == 0)
        assert flat > 0.5

    def test_power_law_spectrum(self, leaves):
        r, p = metrics.radial_spectrum(leaves.images)
        sel = (r >= 2) & (r <= 12)
        slope = np.polyfit(np.log(r[sel]), np.log(p[sel]), 1)[0]
        assert -3.5 <= slope <= -1.0

    @pytest.mark.parametrize("kw", [dict(rmin=2.0, rmax=2.0), dict(rmin=0.0), dict(exponent=1.0),
                                    dict(intensity=(1.0, 0.0))])
    def test_degenerate_params(self, kw):
        with pytest.raises(ContractError):
            data.generate_dead_leaves(1, (1, 8, 8), 0, data.DeadLeavesParams(**kw))


class TestGsm:
    def test_single_scale_concentrates(self):
        ds = data.generate_gsm_textures(300, (1, 32, 32), 0, data.GsmParams(levels=1))
        n = np.linalg.norm(ds.images.reshape(300, -1), axis=1)
        assert n.std() / n.mean() < 0.2

    def test_patch_norms_span_two_octaves(self):
        ds = data.generate_gsm_textures(300, (1, 32, 32), 0, data.GsmParams(ratio=2.0, levels=4))
        pn = metrics.patch_norms(ds.images, 8)
        assert np.log2(np.percentile(pn, 95) / np.percentile(pn, 5)) >= 2.0
        counts, edges = metrics.patch_norm_histogram(ds.images, 8, bins=32)
        occupied = edges[:-1][counts > 0]
        assert np.log2(edges[-1] / max(occupied[0], edges[1])) >= 2.0

    def test_bit_identical_regeneration(self):
        a = data.generate_gsm_textures(5, (1, 16, 16), 9)
        b = data.generate_gsm_textures(5, (1, 16, 16), 9)
        assert a.images.tobytes() == b.images.tobytes()

    def test_unit_field_variance(self):
        ds = data.generate_gsm_textures(400, (1, 16, 16), 2, data.GsmParams(tau0=1.0, levels=1))
        assert ds.images.var() == pytest.approx(1.0, rel=0.05)

    def test_mmse_beats_noisy_input(self):
        p = data.GsmParams()
        ds = data.generate_gsm_textures(50, (1, 16, 16), 3, p)
        rng = np.random.default_rng(0)
        y = ds.images + 0.05 * rng.standard_normal(ds.images.shape)
        err = np.mean((data.gsm_mmse(y, 0.05, (1, 16, 16), p) - ds.images) ** 2)
        assert err < 0.05 ** 2
        # any single fixed-scale Wiener filter does worse than the mixture posterior mean
        for tau in p.scales():
            wiener = data.gsm_mmse(y, 0.05, (1, 16, 16), data.GsmParams(tau0=tau, levels=1))
            assert err < np.mean((wiener - ds.images) ** 2)

    def test_mmse_single_scale_is_wiener(self):
        p = data.GsmParams(levels=1, tau0=0.3)
        rng = np.random.default_rng(1)
        y = rng.standard_normal((1, 8, 8))
        power = data.gsm_spectrum((1, 8, 8), 2.0)
        expect = np.fft.ifft2(np.fft.fft2(y) * 0.09 * power / (0.09 * power + 0.01)).real
        np.testing.assert_allclose(data.gsm_mmse(y, 0.1, (1, 8, 8), p), expect, atol=1e-12)

    def test_invalid(self):
        with pytest.raises(ContractError):
            data.generate_gsm_textures(1, (1, 8, 8), 0, data.GsmParams(ratio=1.0))


class TestMeasurements:
    def test_noiseless_identity(self):
        ds = data.generate_dead_leaves(3, (1, 8, 8), 0)
        m = data.simulate_measurements(ds, identity((1, 8, 8)), 0.0, 1)
        np.testing.assert_array_equal(m.y, ds.images)

    def test_same_seed_bit_identical(self):
        ds = data.generate_gsm_textures(4, (1, 8, 8), 0)
        a = data.simulate_measurements(ds, identity((1, 8, 8)), 0.1, 42)
        b = data.simulate_measurements(ds, identity((1, 8, 8)), 0.1, 42)
        assert a.payload_hash() == b.payload_hash()
        c = data.simulate_measurements(ds, identity((1, 8, 8)), 0.1, 43)
        assert a.payload_hash() != c.payload_hash()

    def test_noise_statistics(self):
        ds = data.Dataset(np.zeros((1000, 1, 32, 32)), "zeros", 0)
        m = data.simulate_measurements(ds, identity((1, 32, 32)), 0.075, 3)
        assert m.y.size >= 10 ** 6
        assert m.y.std() == pytest.approx(0.075, rel=0.01)
        assert abs(m.y.mean()) < 3 * 0.075 / 1000

    def test_order_independent(self):
        # the noise of image i is keyed by (master_seed, i) only
        ds = data.generate_gsm_textures(6, (1, 8, 8), 0)
        full = data.simulate_measurements(ds, identity((1, 8, 8)), 0.1, 5)
        part = data.simulate_measurements(ds.subset(3), identity((1, 8, 8)), 0.1, 5)
        np.testing.assert_array_equal(full.y[:3], part.y)
        eta = data.box_muller_noise(5, 4, 64).reshape(1, 8, 8)
        np.testing.assert_array_equal(full.y[4], ds.images[4] + 0.1 * eta)

    def test_hash_stable_across_processes(self):
        code = ("from nesure import data; from nesure.operators import identity;"
                "ds = data.generate_gsm_textures(4, (1, 8, 8), 0);"
                "print(data.simulate_measurements(ds, identity((1, 8, 8)), 0.1, 42).payload_hash())")
        out = subprocess.run([sys.executable, "-c", code], capture_output=True, text=True, check=True).stdout.strip()
        ds = data.generate_gsm_textures(4, (1, 8, 8), 0)
        assert out == data.simulate_measurements(ds, identity((1, 8, 8)), 0.1, 42).payload_hash()

    def test_masked_measurement_projects(self):
        shape = (1, 8, 8)
        op = inpaint_mask(shape, 0.7, 0)
        ds = data.generate_gsm_textures(3, shape, 0)
        m = data.simulate_measurements(ds, op, 0.1, 1)
        assert np.all(m.y[:, ~op.keep_map()] == 0)

    def test_records(self):
        ds = data.generate_gsm_textures(3, (1, 8, 8), 0)
        m = data.simulate_measurements(ds, identity((1, 8, 8)), 0.1, 1)
        r = m.records[2]
        assert r.image_index == 2 and r.sigma_n == 0.1 and r.noise_seed == data.noise_seed(1, 2)
        assert len({rec.noise_seed for rec in m.records}) == 3

    def test_contracts(self):
        ds = data.generate_gsm_textures(1, (1, 8, 8), 0)
        with pytest.raises(ContractError):
            data.simulate_measurements(ds, identity((1, 8, 8)), -0.1, 0)
        with pytest.raises(ContractError):
            data.simulate_measurements(ds, identity((1, 6, 6)), 0.1, 0)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 2 ** 63), st.integers(0, 10 ** 6), st.integers(1, 200))
    def test_box_muller_prefix_stable(self, seed, index, count):
        long = data.box_muller_noise(seed, index, count + 7)
        np.testing.assert_array_equal(data.box_muller_noise(seed, index, count), long[:count])


class TestFirewall:
    def test_self_supervised_read_trips(self):
        ds = data.generate_gsm_textures(2, (1, 8, 8), 0)
        with data.training_scope("self-supervised"):
            with pytest.raises(AuditViolation):
                ds.images

    def test_supervised_scope_and_disabled_firewall(self):
        ds = data.generate_gsm_textures(2, (1, 8, 8), 0)
        with data.training_scope("supervised"):
            ds.images
        ds.firewall = False
        with data.training_scope("self-supervised"):
            ds.images

    def test_scope_restored(self):
        with data.training_scope("self-supervised"):
            assert data.current_scope() == "self-supervised"
        assert data.current_scope() is None


class TestFiles:
    def test_dataset_round_trip(self, tmp_path):
        ds = data.generate_gsm_textures(5, (1, 8, 8), 3)
        p = tmp_path / "d.eqdl"
        data.save_dataset(ds, p)
        back = data.load_dataset(p)
        assert back.images.tobytes() == ds.images.tobytes()
        assert (back.generator_tag, back.seed, back.shape) == ("gsm_textures", 3, (1, 8, 8))

    def test_measurement_round_trip_with_mask(self, tmp_path, rng):
        shape = (1, 8, 8)
        op = inpaint_mask(shape, 0.7, 4)
        m = data.simulate_measurements(data.generate_gsm_textures(3, shape, 0), op, 0.05, 2)
        p = tmp_path / "m.eqdl"
        data.save_measurements(m, p)
        back = data.load_measurements(p)
        assert back.payload_hash() == m.payload_hash()
        assert (back.sigma_n, back.master_seed, back.op.operator_id) == (0.05, 2, op.operator_id)
        probe = rng.standard_normal((4,) + shape)
        assert back.op.apply(probe).tobytes() == op.apply(probe).tobytes()

    def test_corrupted_payload(self, tmp_path):
        p = tmp_path / "d.eqdl"
        data.save_dataset(data.generate_gsm_textures(2, (1, 4, 4), 0), p)
        blob = bytearray(p.read_bytes())
        blob[-20] ^= 0xFF
        p.write_bytes(bytes(blob))
        with pytest.raises(ChecksumError):
            data.load_dataset(p)

    def test_bad_magic_and_version(self, tmp_path):
        p = tmp_path / "d.eqdl"
        data.save_dataset(data.generate_gsm_textures(2, (1, 4, 4), 0), p)
        blob = bytearray(p.read_bytes())
        bad = tmp_path / "bad.eqdl"
        bad.write_bytes(b"XXXX" + bytes(blob[4:]))
        with pytest.raises(FormatError):
            data.load_dataset(bad)
        blob[4] = 9
        bad.write_bytes(bytes(blob))
        with pytest.raises(VersionError):
            data.load_dataset(bad)

    def test_kind_mismatch(self, tmp_path):
        p = tmp_path / "d.eqdl"
        data.save_dataset(data.generate_gsm_textures(2, (1, 4, 4), 0), p)
        with pytest.raises(FormatError):
            data.load_measurements(p)

    def test_file_bytes_deterministic(self, tmp_path):
        ds = data.generate_gsm_textures(2, (1, 4, 4), 0)
        data.save_dataset(ds, tmp_path / "a")
        data.save_dataset(ds, tmp_path / "b")
        digest = [hashlib.sha256(open(tmp_path / n, "rb").read()).hexdigest() for n in "ab"]
        assert digest[0] == digest[1]
        assert os.path.getsize(tmp_path / "a") > 2 * 16 * 8
