import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from t1q import kernels
from t1q.relaxometry import (AcqParams, ChannelMeta, FitStatus, MAP, PRESETS, SYNTHESIZED, T1_CHANNEL_SCALE,
                             build_input_stack, fit_maps, fit_pd_t1, ir_factor, ir_signal, null_ti, preset,
                             synthesize_series, synthesize_ti, wm_mean_normalize)
from t1q.relaxometry import QuantMaps
from t1q.volume import Volume3D

ACQ = AcqParams()


def closed_form_null(t1, tr):
    return -t1 * math.log((1 + math.exp(-tr / t1)) / 2)


def signals(pd, t1, acq=ACQ):
    return ir_signal(pd, t1, acq.ti1, acq.tr), ir_signal(pd, t1, acq.ti2, acq.tr)


class TestSignal:
    def test_reference_values(self):
        # evaluated independently at 50 significant digits
        assert ir_signal(800.0, 1000.0, 1400.0, 4000.0) == pytest.approx(420.0973688044, rel=1e-12)
        assert ir_signal(800.0, 1000.0, 400.0, 4000.0) == pytest.approx(-257.8595625460, rel=1e-12)

    def test_factor_limits(self):
        assert ir_factor(1e-9, 1000.0, 4000.0) == pytest.approx(-1 + math.exp(-4), abs=1e-11)
        assert ir_factor(3999.999999, 1000.0, 4000.0) == pytest.approx(1 - math.exp(-4), abs=1e-8)

    @pytest.mark.parametrize("ti", [0.0, -5.0, 4000.0, 5000.0])
    def test_rejects_ti_outside_repetition(self, ti):
        with pytest.raises(ValueError):
            ir_signal(1.0, 1000.0, ti, 4000.0)

    def test_rejects_nonpositive_t1(self):
        with pytest.raises(ValueError):
            ir_signal(1.0, 0.0, 400.0, 4000.0)

    @pytest.mark.parametrize("t1", [100.0, 577.0, 1000.0, 2500.0, 9000.0])
    def test_null_ti_matches_closed_form(self, t1):
        assert null_ti(t1, 4000.0) == pytest.approx(closed_form_null(t1, 4000.0), abs=1e-9)

    def test_acq_ordering_validated(self):
        with pytest.raises(ValueError):
            AcqParams(ti1=400, ti2=1400)
        with pytest.raises(ValueError):
            AcqParams(ti1=4000, ti2=400, tr=4000)


class TestFit:
    @settings(max_examples=200, deadline=None)
    @given(t1=st.floats(60.0, 9500.0), pd=st.floats(1e-3, 1e4))
    def test_round_trip(self, t1, pd):
        i1, i2 = signals(pd, t1)
        p, t, s = fit_pd_t1(i1, i2)
        assert s == FitStatus.OK
        assert t == pytest.approx(t1, rel=1e-9)
        assert p == pytest.approx(pd, rel=1e-9)

    def test_t1_outside_bracket(self):
        _, _, s = fit_pd_t1(*signals(1.0, 20.0))
        assert s == FitStatus.OUT_OF_BRACKET
        _, _, s = fit_pd_t1(*signals(1.0, 800.0), bracket=(1000.0, 5000.0))
        assert s == FitStatus.OUT_OF_BRACKET

    def test_zero_signal_is_degenerate(self):
        assert fit_pd_t1(0.0, 0.0)[2] == FitStatus.DEGENERATE

    def test_negative_pd_is_degenerate(self):
        i1, i2 = signals(1.0, 1000.0)
        assert fit_pd_t1(-i1, -i2)[2] == FitStatus.DEGENERATE

    def test_pd_scaling_exact_for_powers_of_two(self):
        i1, i2 = signals(0.83, 1234.5)
        p, t, _ = fit_pd_t1(i1, i2)
        for k in (0.25, 2.0, 1024.0):
            pk, tk, s = fit_pd_t1(k * i1, k * i2)
            assert s == FitStatus.OK and tk == t and pk == k * p

    @settings(max_examples=50, deadline=None)
    @given(k=st.floats(1e-3, 1e3))
    def test_pd_scaling_general(self, k):
        i1, i2 = signals(0.83, 1234.5)
        p, t, _ = fit_pd_t1(i1, i2)
        pk, tk, _ = fit_pd_t1(k * i1, k * i2)
        assert tk == pytest.approx(t, rel=1e-11)
        assert pk == pytest.approx(k * p, rel=1e-11)

    @settings(max_examples=100, deadline=None)
    @given(t1=st.floats(100.0, 5000.0), pd=st.floats(0.1, 100.0))
    def test_magnitude_mode_never_wrong(self, t1, pd):
        i1, i2 = signals(pd, t1)
        p, t, s = fit_pd_t1(abs(i1), abs(i2), magnitude=True)
        assert s in (FitStatus.OK, FitStatus.AMBIGUOUS, FitStatus.OUT_OF_BRACKET)
        if s == FitStatus.OK and i1 > 0:
            assert t == pytest.approx(t1, rel=1e-8)

    def test_magnitude_restores_negative_fgatir(self):
        i1, i2 = signals(1.0, 2000.0)
        assert i2 < 0 < i1
        p, t, s = fit_pd_t1(i1, abs(i2), magnitude=True)
        assert s == FitStatus.OK and t == pytest.approx(2000.0, rel=1e-9)

    def test_magnitude_both_signs_valid_is_ambiguous(self):
        # at short T1 the flipped FGATIR also has an in-bracket root
        i1, i2 = signals(1.0, 1000.0)
        assert fit_pd_t1(i1, -i2)[2] == FitStatus.OK
        assert fit_pd_t1(i1, abs(i2), magnitude=True)[2] == FitStatus.AMBIGUOUS


class TestMaps:
    def make(self, shape=(6, 5, 4), seed=0):
        gen = np.random.default_rng(seed)
        t1 = gen.uniform(300, 3000, shape)
        pd = gen.uniform(0.5, 2.0, shape)
        i1, i2 = signals(pd, t1)
        return Volume3D(i1), Volume3D(i2), pd, t1

    def test_matches_pointwise_fit(self):
        m, f, pd, t1 = self.make()
        maps = fit_maps(m, f)
        idx = (2, 3, 1)
        p, t, s = fit_pd_t1(m.data[idx], f.data[idx])
        assert maps.t1.data[idx] == t and maps.pd.data[idx] == p and maps.status[idx] == s
        np.testing.assert_allclose(maps.t1.data, t1, rtol=1e-9)

    def test_threads_do_not_change_result(self):
        m, f, *_ = self.make((10, 10, 10))
        a = fit_maps(m, f, threads=1)
        b = fit_maps(m, f, threads=3)
        assert a.t1 == b.t1 and a.pd == b.pd and np.array_equal(a.status, b.status)

    def test_mask(self):
        m, f, *_ = self.make()
        mask = np.zeros(m.dims, bool)
        mask[1:3] = True
        maps = fit_maps(m, f, mask=mask)
        assert np.all(maps.status[~mask] == FitStatus.DEGENERATE)
        assert np.all(maps.status[mask] == FitStatus.OK)

    def test_dims_mismatch(self):
        with pytest.raises(ValueError, match="dim mismatch"):
            fit_maps(Volume3D(np.ones((2, 2, 2))), Volume3D(np.ones((2, 2, 3))))

    def test_backends_agree(self):
        m, f, *_ = self.make((8, 8, 8), seed=4)
        results = [fit_maps(m, f, fit=fn) for fn in kernels.available_backends().values()]
        for r in results[1:]:
            np.testing.assert_allclose(r.t1.data, results[0].t1.data, rtol=1e-12)
            np.testing.assert_allclose(r.pd.data, results[0].pd.data, rtol=1e-12)
            assert np.array_equal(r.status, results[0].status)


class TestSynthesis:
    def maps(self):
        t1 = np.full((3, 3, 3), 1000.0)
        pd = np.full((3, 3, 3), 2.0)
        status = np.zeros((3, 3, 3), np.uint8)
        status[0, 0, 0] = FitStatus.OUT_OF_BRACKET
        return QuantMaps(Volume3D(pd), Volume3D(t1), status)

    def test_series_has_51_channels(self):
        stack = synthesize_series(self.maps(), 400, 1400, 20)
        assert len(stack) == 51
        assert stack.meta[0] == ChannelMeta(SYNTHESIZED, "TI400", 400.0)
        assert stack.meta[-1].ti == 1400.0

    def test_synthesis_reproduces_signal_equation(self):
        img = synthesize_ti(self.maps(), 740.0)
        assert img.data[1, 1, 1] == pytest.approx(2.0 * ir_factor(740.0, 1000.0, 4000.0), rel=1e-15)

    def test_non_ok_voxels_are_zero(self):
        img = synthesize_ti(self.maps(), 740.0)
        assert img.data[0, 0, 0] == 0.0 and np.all(np.isfinite(img.data))

    def test_preset_sizes(self):
        assert PRESETS["stage1"].n_channels == 53
        assert PRESETS["config6"].n_channels == 51
        assert [PRESETS[f"config{i}"].n_channels for i in (1, 3, 4, 5, 7, 8, 9)] == [1, 2, 2, 1, 1, 2, 4]
        assert preset("T1MAP") is PRESETS["config5"]
        with pytest.raises(KeyError):
            preset("config10")

    def test_stack_order(self):
        maps = self.maps()
        mp, fg = Volume3D(np.ones((3, 3, 3))), Volume3D(-np.ones((3, 3, 3)))
        stack = build_input_stack(maps, mp, fg, "stage1")
        assert stack.names[:2] == ["TI400", "TI420"] and stack.names[-2:] == ["MPRAGE", "FGATIR"]
        s4 = build_input_stack(maps, mp, fg, "config4")
        assert [m.kind for m in s4.meta] == [MAP, MAP]
        assert s4.array()[1, 1, 1, 1] == 1000.0 * T1_CHANNEL_SCALE

    def test_missing_maps(self):
        with pytest.raises(ValueError):
            build_input_stack(None, Volume3D(np.ones((2, 2, 2))), None, "config5")


def test_common_factor_normalization_preserves_ratio():
    gen = np.random.default_rng(0)
    mp = Volume3D(gen.uniform(1, 2, (4, 4, 4)))
    fg = Volume3D(gen.uniform(-1, 1, (4, 4, 4)))
    mask = np.zeros((4, 4, 4), bool)
    mask[:2] = True
    a = wm_mean_normalize(mp, mask)
    b = wm_mean_normalize(fg, mask, reference=mp)
    assert np.mean(a.data[mask]) == pytest.approx(1.0)
    np.testing.assert_allclose(b.data / a.data, fg.data / mp.data, rtol=1e-14)
    with pytest.raises(ValueError):
        wm_mean_normalize(mp, np.zeros((4, 4, 4), bool))
