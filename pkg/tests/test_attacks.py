"""
Unit tests for threshold fitting, inference and the baseline attacks.
"""

import math

import numpy as np
import pytest
import torch

from sif.errors import AttackFitError, CheckpointMismatchError
from sif.models import AttackModel, SifRecord
from sif.services.attacks import (
    FitRecords,
    attack_from_records,
    blackbox_confidence_attack,
    check_failures,
    confidence_features,
    decide,
    fit_confidence_attack,
    fit_sif_attack,
    gap_balanced_accuracy,
    gap_predictions,
    infer_membership,
    members_sampler,
    one_sided_scan,
    predictions_frame,
    scan_thresholds_naive,
    set_thresholds,
    threshold_grids,
)
from sif.services.influence import LissaConfig, Scorer
from sif.services.metrics import balanced_accuracy


def _records(member_scores, non_member_scores, member_match=None, non_member_match=None):
    member_match = member_match or [1] * len(member_scores)
    non_member_match = non_member_match or [1] * len(non_member_scores)
    members = [SifRecord(i, float(s), m, 1) for i, (s, m) in enumerate(zip(member_scores, member_match))]
    offset = len(members)
    non_members = [
        SifRecord(offset + i, float(s), m, 0)
        for i, (s, m) in enumerate(zip(non_member_scores, non_member_match))
    ]
    return FitRecords(members, non_members)


def _random_records(rng):
    n1, n2 = int(rng.integers(1, 60)), int(rng.integers(1, 60))
    members = rng.normal(-0.5, rng.uniform(0.05, 1.0), n1)
    non_members = rng.normal(rng.uniform(-1.5, 1.0), rng.uniform(0.1, 2.0), n2)
    return _records(
        members,
        non_members,
        list(rng.binomial(1, 0.9, n1)),
        list(rng.binomial(1, 0.6, n2)),
    )


def _outcome(scan, fit, grid_size):
    try:
        result = scan(fit, grid_size)
    except AttackFitError:
        return "empty"
    return result.tau1, result.tau2, result.balanced_accuracy


def _small_scorer():
    return Scorer(lissa=LissaConfig(repeats=1, depth=10, scale=10.0, seed=2))


class TestSetThresholds:
    """Tests for the two-threshold grid search."""

    def test_separable_members_inside(self):
        """Test members in [-0.1, 0] and non-members at -5 and 2 separate perfectly."""
        fit = _records(np.linspace(-0.1, 0.0, 6), [-5.0, 2.0, -5.0, 2.0])
        result = set_thresholds(fit)
        assert result.balanced_accuracy == 1.0
        assert result.tau1 < -0.1 and result.tau2 > 0.0
        assert result.tau1 > -5.0 and result.tau2 < 2.0

    def test_symmetric_members_bracketed(self):
        """Test members {-1, 0, 1} against non-members {-10, 10}."""
        fit = _records([-1.0, 0.0, 1.0], [-10.0, 10.0])
        result = set_thresholds(fit)
        assert result.balanced_accuracy == 1.0
        assert -10.0 <= result.tau1 < -1.0
        assert 1.0 < result.tau2 <= 10.0

    def test_identical_scores(self):
        """Test a zero-width member range still brackets the common score."""
        fit = _records([0.25] * 4, [0.25] * 4)
        result = set_thresholds(fit)
        assert result.tau1 < 0.25 < result.tau2
        assert result.balanced_accuracy == 0.5

    def test_identical_zero_scores(self):
        """Test the zero-width fallback near zero."""
        fit = _records([0.0] * 3, [1.0] * 3)
        result = set_thresholds(fit)
        assert result.tau1 < 0.0 < result.tau2
        assert result.balanced_accuracy == 1.0

    def test_label_mismatch_never_member(self):
        """Test m = 0 members count as misses whatever their score."""
        fit = _records([0.0, 0.1, 0.2, 0.3], [5.0] * 4, member_match=[1, 1, 0, 0])
        assert set_thresholds(fit).balanced_accuracy == pytest.approx(6 / 8)

    def test_grid_spans_member_range(self):
        """Test both grids are one member range wide and centred on its ends."""
        grid1, grid2 = threshold_grids(np.array([-3.0, 1.0]), grid_size=5)
        assert grid1.tolist() == [-5.0, -4.0, -3.0, -2.0, -1.0]
        assert grid2.tolist() == [-1.0, 0.0, 1.0, 2.0, 3.0]

    def test_needs_members(self):
        """Test empty member records are rejected."""
        with pytest.raises(AttackFitError):
            FitRecords([], [SifRecord(0, 1.0, 1, 0)])

    def test_matches_naive_scan_on_random_instances(self):
        """Test prefix counting agrees exactly with the brute-force scan."""
        rng = np.random.default_rng(2024)
        for _ in range(100):
            fit = _random_records(rng)
            assert _outcome(set_thresholds, fit, 60) == _outcome(scan_thresholds_naive, fit, 60)

    def test_matches_naive_scan_on_full_grid(self):
        """Test agreement on the production grid size."""
        rng = np.random.default_rng(7)
        for _ in range(3):
            fit = _random_records(rng)
            assert _outcome(set_thresholds, fit, 1000) == _outcome(scan_thresholds_naive, fit, 1000)

    def test_tied_scores_match_naive_scan(self):
        """Test repeated scores on grid values keep the same tie-break."""
        fit = _records([0.0, 0.0, 1.0, 2.0, 2.0], [1.0, 3.0, -1.0, 0.5], non_member_match=[1, 1, 1, 0])
        assert _outcome(set_thresholds, fit, 5) == _outcome(scan_thresholds_naive, fit, 5)

    def test_positive_rescaling_moves_thresholds(self):
        """Test scaling every score by 4 scales the thresholds and keeps the accuracy."""
        rng = np.random.default_rng(3)
        fit = _random_records(rng)
        scaled = FitRecords(
            [SifRecord(r.sample_id, 4 * r.score, r.label_match, 1) for r in fit.members],
            [SifRecord(r.sample_id, 4 * r.score, r.label_match, 0) for r in fit.non_members],
        )
        a, b = set_thresholds(fit, 200), set_thresholds(scaled, 200)
        assert b.balanced_accuracy == a.balanced_accuracy
        assert b.tau1 == pytest.approx(4 * a.tau1, rel=1e-12)
        assert b.tau2 == pytest.approx(4 * a.tau2, rel=1e-12)

    def test_two_sided_dominates_one_sided(self):
        """Test the interval is never worse than a single threshold from the same grids."""
        rng = np.random.default_rng(11)
        for _ in range(20):
            fit = _random_records(rng)
            try:
                two_sided = set_thresholds(fit, 100).balanced_accuracy
            except AttackFitError:
                continue
            for side in ("upper", "lower"):
                assert two_sided >= one_sided_scan(fit, 100, side).balanced_accuracy

    def test_one_sided_bounds_are_infinite(self):
        """Test the single-threshold rules leave one side open."""
        fit = _records([-1.0, 0.0], [3.0])
        assert one_sided_scan(fit, 10, "upper").tau1 == -math.inf
        assert one_sided_scan(fit, 10, "lower").tau2 == math.inf


class TestDecide:
    """Tests for the membership rule."""

    def test_boundaries_are_strict(self):
        """Test scores equal to a threshold are non-members."""
        attack = AttackModel(tau1=-1.0, tau2=1.0)
        assert decide(attack, SifRecord(0, 1.0, 1)) == 0
        assert decide(attack, SifRecord(0, -1.0, 1)) == 0
        assert decide(attack, SifRecord(0, 0.0, 1)) == 1

    def test_misclassified_is_non_member(self):
        """Test m = 0 overrides an in-interval score."""
        assert decide(AttackModel(tau1=-1.0, tau2=1.0), SifRecord(0, 0.0, 0)) == 0

    def test_degenerate_interval_rejected(self):
        """Test tau1 >= tau2 cannot be stored."""
        with pytest.raises(AttackFitError):
            AttackModel(tau1=1.0, tau2=1.0)

    def test_attack_json_round_trip(self):
        """Test the attack survives to_dict/from_dict."""
        attack = AttackModel(
            tau1=-0.5, tau2=0.25, scorer=_small_scorer().descriptor(),
            checkpoint_fingerprint="abc", seed=4, train_balanced_accuracy=0.75,
            grid_size=100, dropped_samples=[3],
        )
        assert AttackModel.from_dict(attack.to_dict()) == attack


class TestFailureBudget:
    """Tests for the per-sample failure budget."""

    def test_one_percent_is_tolerated(self):
        """Test one failure in a hundred samples only warns."""
        check_failures({5: "diverged"}, 100)

    def test_above_budget_aborts(self):
        """Test two failures in a hundred samples abort the fit."""
        with pytest.raises(AttackFitError):
            check_failures({5: "diverged", 9: "diverged"}, 100)


class TestSifAttack:
    """Tests for fitting and inference on a trained target."""

    def test_fit_records_fingerprint_and_scorer(self, logreg_checkpoint, blobs, blob_split):
        """Test the fitted attack carries what inference needs."""
        scorer = _small_scorer()
        attack = fit_sif_attack(logreg_checkpoint, blobs, blob_split, scorer, grid_size=100)
        assert attack.tau1 < attack.tau2
        assert attack.checkpoint_fingerprint == logreg_checkpoint.fingerprint
        assert Scorer.from_descriptor(attack.scorer) == scorer
        assert 0.0 <= attack.train_balanced_accuracy <= 1.0

    def test_inference_matches_rule(self, logreg_checkpoint, blobs, blob_split):
        """Test infer_membership applies the interval and label rule to the sample's score."""
        scorer = _small_scorer()
        sampler = members_sampler(blobs, blob_split, scorer)
        fit = FitRecords([SifRecord(0, -1.0, 1, 1), SifRecord(1, 0.0, 1, 1)], [SifRecord(2, 5.0, 1, 0)])
        attack = attack_from_records(fit, scorer, logreg_checkpoint, grid_size=50)
        for sample_id in blob_split.mem_test[:3] + blob_split.nonmem_test[:3]:
            z = blobs.sample(sample_id)
            record = scorer.score(logreg_checkpoint, sampler, z, sample_id)
            assert infer_membership(attack, logreg_checkpoint, z, sampler, sample_id) == decide(attack, record)

    def test_inference_refuses_other_checkpoint(self, logreg_checkpoint, blobs, blob_split):
        """Test a fingerprint mismatch is an error."""
        attack = AttackModel(tau1=-1.0, tau2=1.0, scorer=_small_scorer().descriptor(), checkpoint_fingerprint="0" * 64)
        sampler = members_sampler(blobs, blob_split, _small_scorer())
        with pytest.raises(CheckpointMismatchError):
            infer_membership(attack, logreg_checkpoint, blobs.sample(0), sampler)


class TestGapAttack:
    """Tests for the generalization-gap baseline."""

    @pytest.mark.parametrize(
        "attack_non_member_accuracy, expected",
        [(0.780, 0.890), (0.980, 0.990), (0.231, 0.616)],
    )
    def test_tabulated_rows(self, attack_non_member_accuracy, expected):
        """Test a perfect-member row from the attack's non-member accuracy."""
        model_non_member_accuracy = 1.0 - attack_non_member_accuracy
        assert gap_balanced_accuracy(1.0, model_non_member_accuracy) == pytest.approx(expected, abs=1e-3)
        wrong = round(1000 * attack_non_member_accuracy)
        non_member_preds = [0] * wrong + [1] * (1000 - wrong)
        assert balanced_accuracy([1] * 1000, non_member_preds) == pytest.approx(expected, abs=1e-3)

    def test_no_generalization_gap(self):
        """Test equal accuracies give chance level."""
        assert gap_balanced_accuracy(0.7, 0.7) == 0.5

    def test_predictions_are_label_matches(self, logreg_checkpoint, blobs, blob_split):
        """Test gap predictions equal correct classification."""
        ids = blob_split.mem_test[:10]
        preds = gap_predictions(logreg_checkpoint, blobs, ids)
        batch = blobs.batch(ids)
        logits = logreg_checkpoint.spec.logits(logreg_checkpoint.params.views(), batch.inputs)
        assert preds.tolist() == (logits.argmax(dim=1) == batch.labels).long().tolist()
        assert gap_predictions(logreg_checkpoint, blobs, []).size == 0


class TestConfidenceAttack:
    """Tests for the black-box confidence baseline."""

    def test_features(self):
        """Test sorted probabilities, cross-entropy and the match bit."""
        probs = torch.tensor([[0.2, 0.7, 0.1], [0.5, 0.3, 0.2]], dtype=torch.float64)
        features = confidence_features(probs, torch.tensor([1, 2]))
        assert features[0].tolist() == pytest.approx([0.7, 0.2, 0.1, -math.log(0.7), 1.0])
        assert features[1].tolist() == pytest.approx([0.5, 0.3, 0.2, -math.log(0.2), 0.0])

    def test_separable_features(self):
        """Test confident members and uniform non-members are told apart."""
        labels = torch.zeros(20, dtype=torch.long)
        confident = torch.tensor([[1.0, 0.0, 0.0]] * 20, dtype=torch.float64)
        uniform = torch.full((20, 3), 1 / 3, dtype=torch.float64)
        member_features = confidence_features(confident, labels)
        non_member_features = confidence_features(uniform, labels)
        model = fit_confidence_attack(member_features, non_member_features)
        assert model.predict(member_features).tolist() == [1.0] * 20
        assert model.predict(non_member_features).tolist() == [0.0] * 20

    def test_needs_both_classes(self):
        """Test fitting without non-members fails."""
        with pytest.raises(AttackFitError):
            fit_confidence_attack(np.ones((3, 5)), np.zeros((0, 5)))

    def test_predicts_eval_subsets(self, logreg_checkpoint, blobs, blob_split):
        """Test one 0/1 prediction per evaluation sample."""
        result = blackbox_confidence_attack(logreg_checkpoint, blobs, blob_split)
        assert len(result.member_predictions) == len(blob_split.mem_test)
        assert len(result.non_member_predictions) == len(blob_split.nonmem_test)
        assert set(result.member_predictions.tolist()) <= {0, 1}


class TestPredictionsFrame:
    def test_sorted_by_sample_id(self):
        """Test rows are ordered by id with ground truth attached."""
        frame = predictions_frame([5, 1], [1, 0], [3], [1])
        assert frame["sample_id"].tolist() == [1, 3, 5]
        assert frame["ground_truth"].tolist() == [1, 0, 1]
        assert frame["prediction"].tolist() == [0, 1, 1]
