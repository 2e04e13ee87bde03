"""Tests for the spotter: RoI pooling, heads, fusion paths, losses, assembly and training."""

import json
import math

import numpy as np
import pytest
import torch

from drspot.geometry import rect_to_quad
from drspot.glyphgen import class_to_char
from drspot.gpm import LandmarkNet
from drspot.grm import GraphReasoning
from drspot.spotter.assemble import CharDetection, assemble_text
from drspot.spotter.config import TrainConfig, dump_config, load_config
from drspot.spotter.data import SpotDataset, jitter_rects, make_proposals, rect_iou, sample_negatives
from drspot.spotter.inference import load_spotter, load_state_compatible, predict_records, read_checkpoint, save_checkpoint
from drspot.spotter.losses import smooth_l1, spotting_loss
from drspot.spotter.model import (
    Backbone,
    CharHead,
    DRSpotter,
    decode_boxes,
    encode_boxes,
    extract_roi,
    recognize_character,
    rects_to_quads,
)
from drspot.spotter.train import STAGE_MODULES, _set_trainable, stage_lr, train_three_stage
from drspot.transforms import bilinear_sample

from conftest import tiny_train_config


def quads(*rects):
    return rects_to_quads(torch.tensor(rects, dtype=torch.float64))


class TestExtractRoi:
    def test_cell_aligned_box_copies_features(self):
        # stride 4: a 4x4-cell box on cell borders samples exactly the cell centers
        feat = torch.randn(1, 3, 6, 8, dtype=torch.float64)
        out = extract_roi(feat, quads([8, 4, 24, 20]), torch.tensor([0]), 4)
        assert torch.allclose(out[0], feat[0, :, 1:5, 2:6], atol=1e-12)

    def test_constant_map_inside_extent(self):
        feat = torch.full((1, 2, 8, 8), 3.0, dtype=torch.float64)
        out = extract_roi(feat, quads([2.5, 3.0, 27.0, 20.5]), torch.tensor([0]), 5)
        assert torch.allclose(out, torch.full_like(out, 3.0))

    def test_matches_bilinear_oracle(self):
        rng = np.random.default_rng(0)
        feat = torch.tensor(rng.normal(size=(2, 3, 7, 9)))
        boxes = quads([1.3, 2.2, 20.1, 17.9], [5.0, 0.5, 33.0, 26.0], [0.2, 0.1, 9.0, 4.0])
        bidx = torch.tensor([1, 0, 1])
        out = extract_roi(feat, boxes, bidx, (3, 4))
        for r in range(3):
            x0, y0, x1, y1 = boxes[r, 0, 0], boxes[r, 0, 1], boxes[r, 2, 0], boxes[r, 2, 1]
            xs = x0 + (torch.arange(4, dtype=torch.float64) + 0.5) / 4 * (x1 - x0)
            ys = y0 + (torch.arange(3, dtype=torch.float64) + 0.5) / 3 * (y1 - y0)
            yy, xx = torch.meshgrid(ys, xs, indexing="ij")
            pts = torch.stack([xx, yy], -1).reshape(1, -1, 2) / 4 - 0.5
            ref = bilinear_sample(feat[bidx[r] : bidx[r] + 1], pts)[0].T.reshape(3, 3, 4)
            assert torch.allclose(out[r], ref, atol=1e-12)

    def test_gradcheck(self):
        feat = torch.randn(1, 2, 4, 4, dtype=torch.float64, requires_grad=True)
        boxes = quads([1.7, 2.3, 11.1, 13.4]).requires_grad_(True)
        fn = lambda f, b: extract_roi(f, b, torch.tensor([0]), 3)  # noqa: E731
        assert torch.autograd.gradcheck(fn, (feat, boxes), eps=1e-6, atol=1e-6)

    def test_invalid_boxes(self):
        feat = torch.zeros(1, 1, 4, 4)
        with pytest.raises(ValueError, match="positive width"):
            extract_roi(feat, quads([3, 3, 3, 8]).float(), torch.tensor([0]), 2)
        with pytest.raises(ValueError, match="fully outside"):
            extract_roi(feat, quads([40, 40, 50, 50]).float(), torch.tensor([0]), 2)

    def test_empty(self):
        assert extract_roi(torch.zeros(1, 3, 4, 4), torch.zeros(0, 4, 2), torch.zeros(0, dtype=torch.long), 2).shape == (0, 3, 2, 2)


class TestBackbone:
    def test_output_shape(self):
        bb = Backbone((4, 4, 8), 6)
        assert bb(torch.rand(2, 1, 16, 24)).shape == (2, 6, 4, 6)

    def test_zero_image_gives_zero_features(self):
        bb = Backbone((4, 4, 8), 6).eval()
        assert torch.equal(bb(torch.zeros(1, 1, 8, 8)), torch.zeros(1, 6, 2, 2))

    def test_stride_check(self):
        with pytest.raises(ValueError, match="multiple"):
            Backbone()(torch.zeros(1, 1, 10, 12))


def fusion_parts(fusion, k=4, d=6, grid=6, patch=10, classes=7):
    torch.manual_seed(0)
    gpm = LandmarkNet(d, k, 8)
    grm = GraphReasoning(d, grid, k) if fusion == "graph" else None
    head = CharHead(d, grid, classes, 16, extra_in=k * d if fusion == "concat" else 0)
    return gpm, grm, head


class TestRecognizeCharacter:
    @pytest.mark.parametrize("fusion", ["graph", "concat", "sum", "none"])
    @pytest.mark.parametrize("k", [4, 8, 16, 24])
    def test_shapes(self, fusion, k):
        gpm, grm, head = fusion_parts(fusion, k)
        logits, deltas = recognize_character(torch.randn(3, 6, 10, 10), torch.randn(3, 6, 6, 6), gpm, grm, head, fusion)
        assert logits.shape == (3, 8) and deltas.shape == (3, 4)

    @pytest.mark.parametrize("fusion", ["graph", "concat"])
    def test_zero_initialized_fusion_equals_baseline(self, fusion):
        gpm, grm, head = fusion_parts(fusion)
        h, f_c = torch.randn(3, 6, 10, 10), torch.randn(3, 6, 6, 6)
        head.eval()
        fused = recognize_character(h, f_c, gpm, grm, head, fusion)
        base = recognize_character(None, f_c, None, None, head, "none")
        assert torch.equal(fused[0], base[0])

    def test_gradients_reach_inputs_and_all_trainables(self):
        gpm, grm, head = fusion_parts("graph")
        with torch.no_grad():
            grm.adjacency.normal_(0, 0.1)
            grm.w_state.normal_(0, 0.1)
        h = torch.randn(2, 6, 10, 10, requires_grad=True)
        f_c = torch.randn(2, 6, 6, 6, requires_grad=True)
        logits, _ = recognize_character(h, f_c, gpm, grm, head, "graph")
        logits.sum().backward()
        assert h.grad.abs().sum() > 0 and f_c.grad.abs().sum() > 0
        assert all(p.grad is not None for p in list(grm.parameters()) + list(gpm.parameters()))

    def test_frozen_landmark_net_gets_no_gradient_but_patch_does(self):
        gpm, grm, head = fusion_parts("graph")
        gpm.requires_grad_(False)
        with torch.no_grad():
            grm.adjacency.normal_(0, 0.1)
            grm.w_state.normal_(0, 0.1)
        h = torch.randn(2, 6, 10, 10, requires_grad=True)
        recognize_character(h, torch.randn(2, 6, 6, 6), gpm, grm, head, "graph")[0].sum().backward()
        assert h.grad.abs().sum() > 0
        assert all(p.grad is None for p in gpm.parameters())


class TestBoxes:
    def test_encode_decode_round_trip(self):
        props = torch.tensor([[0.0, 0.0, 10.0, 20.0], [5.0, 5.0, 9.0, 30.0]])
        tgt = torch.tensor([[1.0, -2.0, 12.0, 19.0], [4.0, 6.0, 10.0, 28.0]])
        assert torch.allclose(decode_boxes(props, encode_boxes(props, tgt)), tgt, atol=1e-5)

    def test_identity_encodes_to_zero(self):
        props = torch.tensor([[3.0, 4.0, 10.0, 20.0]])
        assert torch.equal(encode_boxes(props, props), torch.zeros(1, 4))


class TestLosses:
    def test_smooth_l1_values(self):
        assert smooth_l1(torch.tensor(0.5)).item() == 0.125
        assert smooth_l1(torch.tensor(-2.0)).item() == 1.5

    def test_near_zero_for_confident_correct_predictions(self):
        logits = torch.full((3, 5), -50.0)
        logits[torch.arange(3), torch.tensor([0, 2, 4])] = 50.0
        total, report = spotting_loss(logits, torch.zeros(3, 4), torch.tensor([0, 2, 4]), torch.zeros(3, 4))
        assert total.item() < 1e-12 and set(report) == {"crb_cls", "crb_bbox", "total"}

    def test_terms_add_up_and_box_terms_skip_negatives(self):
        torch.manual_seed(0)
        cl, cd = torch.randn(4, 5), torch.randn(4, 4)
        tl, td = torch.randn(3, 2), torch.randn(3, 4)
        labels, tlabels = torch.tensor([1, 4, 4, 0]), torch.tensor([1, 0, 1])
        targets = torch.randn(4, 4)
        total, report = spotting_loss(cl, cd, labels, targets, tl, td, tlabels, torch.randn(3, 4), background_class=4)
        assert total.item() == pytest.approx(sum(report[k] for k in ("crb_cls", "crb_bbox", "tdb_cls", "tdb_bbox")), rel=1e-6)
        pos = torch.tensor([0, 3])
        assert report["crb_bbox"] == pytest.approx(smooth_l1(cd[pos] - targets[pos]).sum(-1).mean().item(), rel=1e-6)
        moved = cd.clone()
        moved[1:3] += 100
        assert spotting_loss(cl, moved, labels, targets, background_class=4)[1]["crb_bbox"] == pytest.approx(report["crb_bbox"])


def det(x0, x1, c, y0=0, y1=10):
    return CharDetection(rect_to_quad(x0, y0, x1, y1), c, 0.9)


class TestAssemble:
    def test_reads_left_to_right(self):
        dets = [det(20, 28, 2), det(0, 8, 0), det(10, 18, 1)]
        (spot,) = assemble_text(dets, [rect_to_quad(0, 0, 30, 10)])
        assert spot.text == class_to_char(0) + class_to_char(1) + class_to_char(2)

    def test_vertical_line_reads_top_to_bottom(self):
        dets = [CharDetection(rect_to_quad(0, y, 10, y + 8), c, 0.9) for y, c in ((20, 5), (0, 3))]
        (spot,) = assemble_text(dets, [rect_to_quad(0, 0, 10, 30)])
        assert spot.text == class_to_char(3) + class_to_char(5)

    def test_character_without_overlap_is_dropped(self):
        (spot,) = assemble_text([det(0, 8, 0), det(100, 108, 1)], [rect_to_quad(0, 0, 30, 10)])
        assert spot.text == class_to_char(0)

    def test_threshold_with_plain_iou(self):
        # char [0,6]x[0,10] in line [0,10]x[0,10]: IOU 0.6 passes 0.3 but not 0.7
        line = [rect_to_quad(0, 0, 10, 10)]
        assert assemble_text([det(0, 6, 0)], line, 0.3, overlap="iou")[0].text == class_to_char(0)
        assert assemble_text([det(0, 6, 0)], line, 0.7, overlap="iou")[0].text == ""

    def test_goes_to_best_line_and_ties_to_lower_index(self):
        lines = [rect_to_quad(0, 0, 20, 10), rect_to_quad(10, 0, 30, 10)]
        spots = assemble_text([det(4, 12, 0), det(12, 18, 1)], lines, overlap="iou")
        assert spots[0].text == class_to_char(0) and spots[1].text == ""
        spots = assemble_text([det(12, 18, 1)], lines)
        assert spots[0].text == class_to_char(1)

    def test_validation(self):
        with pytest.raises(ValueError, match="score"):
            CharDetection(rect_to_quad(0, 0, 1, 1), 0, 1.5)
        with pytest.raises(ValueError, match="iou_threshold"):
            assemble_text([], [], 1.0)


class TestProposals:
    def test_jitter_stays_close_and_inside(self):
        rng = np.random.default_rng(0)
        rects = np.array([[10.0, 10.0, 30.0, 40.0]])
        out = jitter_rects(np.repeat(rects, 200, 0), rng, 0.1, (64, 64))
        assert (rect_iou(out, rects)[:, 0] > 0.5).all()
        assert (out[:, :2] >= 0).all() and (out[:, 2:] <= 64).all()

    def test_negatives_avoid_positives(self):
        rng = np.random.default_rng(1)
        pos = np.array([[10.0, 10.0, 30.0, 30.0], [40.0, 10.0, 60.0, 30.0]])
        neg = sample_negatives(pos, rng, (128, 64))
        assert (rect_iou(neg, pos) < 0.3).all()

    def test_batch_labels(self, tiny_data):
        data = SpotDataset.load(tiny_data / "train")
        props = make_proposals(data, [0, 1], np.random.default_rng(0), 0.1, 50)
        n_chars = sum(len(data.char_rects[i]) for i in (0, 1))
        assert (props.char_labels < 50).sum() == n_chars
        assert props.char_rects.shape[0] == props.char_labels.shape[0] == props.char_index.shape[0]


class TestConfig:
    def test_toml_round_trip(self, tmp_path, tiny_cfg):
        path = dump_config(tiny_cfg.replace(fusion="sum", lam=3.5), tmp_path / "c.toml")
        assert load_config(path) == tiny_cfg.replace(fusion="sum", lam=3.5)

    def test_rejects_bad_values(self):
        with pytest.raises(ValueError, match="fusion"):
            TrainConfig(fusion="mean")
        with pytest.raises(ValueError, match="lambda"):
            TrainConfig(lam=-1)
        with pytest.raises(ValueError, match="unknown config key"):
            TrainConfig.from_dict({"alpha": 1})

    def test_lr_schedule(self):
        assert [stage_lr(0.02, e, [8, 10]) for e in (0, 7, 8, 9, 10)] == pytest.approx([0.02, 0.02, 0.002, 0.002, 0.0002])


@pytest.fixture(scope="module")
def trained(tiny_data, tmp_path_factory):
    cfg = tiny_train_config()
    out = tmp_path_factory.mktemp("train")
    data = SpotDataset.load(tiny_data / "train")
    val = SpotDataset.load(tiny_data / "test_A", limit=2)
    return cfg, out, train_three_stage(cfg, data, val, out), data


class TestTraining:
    def test_log_records_and_lr_decay(self, trained):
        _, out, _, _ = trained
        records = [json.loads(l) for l in (out / "metrics.jsonl").read_text().splitlines()]
        assert [(r["stage"], r["epoch"]) for r in records] == [(1, 1), (1, 2), (2, 1), (3, 1), (3, 2)]
        assert [r["lr"] for r in records if r["stage"] == 1] == pytest.approx([0.02, 0.002])
        assert {"1-NED", "P", "R", "F"} <= set(records[-1])
        assert set(records[2]["loss"]) == {"align", "div", "total"}

    def test_freeze_discipline(self, trained):
        _, out, _, _ = trained
        s1, s2, s3 = (read_checkpoint(out / f"stage{n}.pt")["state"] for n in (1, 2, 3))
        for name in s1:
            if not name.startswith(("gpm.", "grm.")):
                assert torch.equal(s1[name], s2[name]), f"{name} changed during landmark training"
        assert any(not torch.equal(s2[n], s3[n]) for n in s2 if n.startswith("backbone."))
        assert all(torch.equal(s2[n], s3[n]) for n in s2 if n.startswith("gpm."))

    def test_landmark_stage_trains_only_the_landmark_net(self, trained):
        _, out, _, _ = trained
        s1, s2 = (read_checkpoint(out / f"stage{n}.pt")["state"] for n in (1, 2))
        assert any(not torch.equal(s1[n], s2[n]) for n in s1 if n.startswith("gpm."))

    def test_set_trainable(self, tiny_cfg):
        model = DRSpotter(tiny_cfg)
        params = _set_trainable(model, 2)
        assert {id(p) for p in params} == {id(p) for p in model.gpm.parameters()}
        assert not model.backbone.training and model.gpm.training

    def test_classifier_is_redrawn_for_stage_three(self, tiny_cfg):
        model = DRSpotter(tiny_cfg)
        before = model.char_head.cls.weight.clone()
        with torch.no_grad():
            model.char_head.cls.weight.zero_()
        model.reset_classifier()
        assert not torch.equal(model.char_head.cls.weight, torch.zeros_like(before))
        other = DRSpotter(tiny_cfg)
        other.reset_classifier()
        assert torch.equal(model.char_head.cls.weight, other.char_head.cls.weight)

    def test_checkpoint_round_trip_and_predictions(self, trained, tiny_data):
        _, _, result, _ = trained
        model = load_spotter(result.checkpoints[3])
        again = load_spotter(result.checkpoints[3])
        a = predict_records(model, tiny_data / "test_A")
        b = predict_records(again, tiny_data / "test_A")
        assert [[p.text for p in r.preds] for r in a] == [[p.text for p in r.preds] for r in b]
        assert model.fusion_enabled

    def test_resume_skips_finished_stages(self, trained, tmp_path):
        cfg, out, _, data = trained
        res = train_three_stage(cfg, data, None, tmp_path, resume_from=out / "stage2.pt")
        assert set(res.checkpoints) == {3}
        records = [json.loads(l) for l in (tmp_path / "metrics.jsonl").read_text().splitlines()]
        assert {r["stage"] for r in records} == {3}

    def test_checkpoint_shape_mismatch(self, trained, tiny_cfg):
        _, out, _, _ = trained
        model = DRSpotter(tiny_cfg.replace(K=8))
        with pytest.raises(ValueError, match="shape"):
            load_state_compatible(model, read_checkpoint(out / "stage3.pt")["state"])

    def test_nan_aborts_with_location(self, tiny_data, tmp_path, tiny_cfg):
        data = SpotDataset.load(tiny_data / "train")
        with pytest.raises(FloatingPointError, match="stage 1, epoch 1, step 1"):
            train_three_stage(tiny_cfg.replace(lr=math.inf, stages=[1]), data, None, tmp_path)

    def test_save_rejects_unwritable_path(self, tiny_cfg, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        with pytest.raises(OSError):
            save_checkpoint(DRSpotter(tiny_cfg), blocker / "sub" / "m.pt", 1)

    def test_stage_module_prefixes(self):
        assert STAGE_MODULES[3] == ("",)
