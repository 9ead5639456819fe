import numpy as np
import pytest

from mdreg import (
    ConfigError,
    EmbeddingSet,
    HyperParams,
    NormalizationWarning,
    ReferencePoints,
    SupportSet,
    ValueGroups,
    load_embedding_csv,
    normalize_rows,
    save_embedding_csv,
    validate_embedding_set,
)


def unit_rows(rng, n, d):
    return normalize_rows(rng.standard_normal((n, d)))


def make_set(vectors, labels=None, domain="source"):
    vectors = np.atleast_2d(vectors)
    n = vectors.shape[0]
    if labels is None:
        labels = np.linspace(0.0, 1.0, n)
    return EmbeddingSet(tuple(f"s{i}" for i in range(n)), vectors, labels, domain)


class TestValidateEmbeddingSet:
    def test_valid_set_has_no_violations(self):
        rng = np.random.default_rng(0)
        assert validate_embedding_set(make_set(unit_rows(rng, 3, 4))) == []

    def test_bad_norm_reported_at_row(self):
        rng = np.random.default_rng(1)
        v = unit_rows(rng, 3, 4)
        v = v.copy()
        v[1] *= 2.0
        out = validate_embedding_set(make_set(v))
        assert len(out) == 1
        assert out[0].kind == "row_norm" and out[0].index == 1

    def test_nan_label_reported_at_index(self):
        rng = np.random.default_rng(2)
        labels = np.array([0.0, np.nan, 2.0])
        out = validate_embedding_set(make_set(unit_rows(rng, 3, 4), labels))
        assert len(out) == 1
        assert out[0].kind == "label_not_finite" and out[0].index == 1

    def test_nonfinite_vector_reported(self):
        v = np.array([[1.0, 0.0], [np.inf, 0.0]])
        out = validate_embedding_set(make_set(v))
        kinds = {o.kind for o in out}
        assert "vector_not_finite" in kinds

    def test_dimension_too_small_reported(self):
        v = np.ones((3, 1))
        out = validate_embedding_set(make_set(v))
        assert any(o.kind == "dim" for o in out)

    def test_normalized_vectors_never_violate_norm(self):
        # normalizing any nonzero vector then validating yields no norm violations
        rng = np.random.default_rng(3)
        for trial in range(20):
            raw = rng.standard_normal((8, 5)) * 10.0 ** rng.integers(-3, 4)
            out = validate_embedding_set(make_set(normalize_rows(raw)))
            assert not any(o.kind == "row_norm" for o in out)

    def test_validation_is_idempotent_and_pure(self):
        rng = np.random.default_rng(4)
        es = make_set(unit_rows(rng, 4, 3))
        before = es.vectors.copy()
        first = validate_embedding_set(es)
        second = validate_embedding_set(es)
        assert first == second
        np.testing.assert_array_equal(es.vectors, before)


class TestValueGroups:
    def test_boundaries_equally_spaced(self):
        g = ValueGroups(0.0, 25.0, 5)
        np.testing.assert_allclose(g.boundaries, [0, 5, 10, 15, 20, 25], atol=1e-12)
        assert g.width == 5.0

    def test_rejects_inverted_bounds(self):
        with pytest.raises(ValueError):
            ValueGroups(3.0, 1.0, 4)

    def test_rejects_degenerate_range(self):
        with pytest.raises(ValueError):
            ValueGroups(1.0, 1.0, 2)


class TestSupportSet:
    def test_rejects_duplicate_indices(self):
        with pytest.raises(ValueError, match="distinct"):
            SupportSet(np.array([1, 1]), np.array([0.5, 0.5]), np.array([0, 0]), shots=2)

    def test_rejects_group_overflow(self):
        with pytest.raises(ValueError):
            SupportSet(np.array([0, 1, 2]), np.zeros(3), np.array([0, 0, 0]), shots=2)


class TestHyperParams:
    def test_defaults_match_deployment_settings(self):
        hp = HyperParams()
        assert hp.diffusion_gamma == 3.0
        assert hp.diffusion_alpha == 0.99
        assert hp.loss_weights == (1.0, 66.0, 33.0)
        assert hp.resolve_knn_k(5) == 5       # k = N
        assert hp.resolve_k_v(5) == 10        # k_v = 2N

    def test_explicit_values_override_resolution(self):
        hp = HyperParams(knn_k=7, k_v=3)
        assert hp.resolve_knn_k(5) == 7
        assert hp.resolve_k_v(5) == 3

    def test_alpha_must_be_in_open_interval(self):
        with pytest.raises(ValueError):
            HyperParams(diffusion_alpha=1.0)
        with pytest.raises(ValueError):
            HyperParams(diffusion_alpha=0.0)

    def test_roundtrip_via_dict(self):
        hp = HyperParams(knn_k=4, k_v=8, gol_margin=0.25)
        assert HyperParams.from_dict(hp.to_dict()) == hp


class TestEmbeddingCsv:
    def test_roundtrip_is_bit_exact(self, tmp_path):
        rng = np.random.default_rng(7)
        es = make_set(unit_rows(rng, 6, 4), rng.uniform(0, 25, 6), domain="target")
        path = tmp_path / "emb.csv"
        save_embedding_csv(path, es)
        back = load_embedding_csv(path)
        assert back.ids == es.ids
        assert back.domain_tag == "target"
        np.testing.assert_array_equal(back.labels, es.labels)
        np.testing.assert_allclose(back.vectors, es.vectors, rtol=0, atol=1e-15)

    def test_loader_warns_on_denormalized_rows(self, tmp_path):
        path = tmp_path / "raw.csv"
        path.write_text(
            "id,label,domain,e0,e1\n"
            "a,1.0,source,3.0,4.0\n"
            "b,2.0,source,1.0,0.0\n"
        )
        with pytest.warns(NormalizationWarning):
            es = load_embedding_csv(path)
        np.testing.assert_allclose(np.linalg.norm(es.vectors, axis=1), 1.0, atol=1e-12)
        np.testing.assert_allclose(es.vectors[0], [0.6, 0.8])

    def test_mixed_domains_require_selection(self, tmp_path):
        path = tmp_path / "mixed.csv"
        path.write_text(
            "id,label,domain,e0,e1\n"
            "a,1.0,source,1.0,0.0\n"
            "b,2.0,target,0.0,1.0\n"
        )
        with pytest.raises(ConfigError, match="domains"):
            load_embedding_csv(path)
        es = load_embedding_csv(path, domain="target")
        assert es.ids == ("b",)

    def test_missing_and_malformed_files_rejected(self, tmp_path):
        with pytest.raises((ConfigError, FileNotFoundError)):
            load_embedding_csv(tmp_path / "absent.csv")
        bad = tmp_path / "bad.csv"
        bad.write_text("id,label\n")
        with pytest.raises(ConfigError):
            load_embedding_csv(bad)


class TestReferencePoints:
    def test_needs_two_points(self):
        with pytest.raises(ValueError):
            ReferencePoints(np.ones((1, 3)))

    def test_rows_are_frozen(self):
        refs = ReferencePoints(np.zeros((2, 3)))
        with pytest.raises(ValueError):
            refs.points[0, 0] = 1.0
