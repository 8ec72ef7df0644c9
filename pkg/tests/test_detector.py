import copy
import json
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from advtee.boxes import decode_deltas, pairwise_iou
from advtee.data import synth_dataset
from advtee.detector import (DetectorPredictions, ExternalAdapter, HttpAdapter, ToyAdapter, ToyGridNet, load_adapter,
                             load_checkpoint, match_candidates, save_checkpoint, train_toy_detector)
from advtee.errors import AdapterFailure, ConvergenceFailure

from conftest import central_fd, rel_error


def fake_detector(weights=None):
    """Factory used through ``load_adapter``: one fixed box, score from mean brightness."""
    def fn(image):
        return [{"box": [0.5, 0.5, 0.2, 0.4], "score": float(np.mean(image))}]
    return fn


def untrained(family="yolo", seed=0):
    torch.manual_seed(seed)
    return ToyAdapter(ToyGridNet(family))


def test_predict_deterministic_on_zeros():
    ad = untrained()
    img = np.zeros((112, 112, 3), np.float32)
    a, b = ad.predict(img), ad.predict(img)
    assert len(a) == 49
    assert torch.equal(a.scores, b.scores) and torch.equal(a.boxes, b.boxes)
    assert torch.all((a.scores >= 0) & (a.scores <= 1))
    torch.testing.assert_close(a.class_probs[:, 0], a.scores)
    torch.testing.assert_close(a.class_probs.sum(-1), torch.ones(49))


def test_predict_rejects_wrong_shape():
    with pytest.raises(AdapterFailure):
        untrained().predict(np.zeros((64, 64, 3), np.float32))


def test_two_stage_head_exposes_deltas():
    ad = untrained("two_stage")
    p = ad.predict(np.full((112, 112, 3), 0.3, np.float32))
    assert p.deltas is not None and p.anchors is not None
    torch.testing.assert_close(decode_deltas(p.deltas, p.anchors), p.boxes)


def test_training_is_seeded_and_validated():
    data = synth_dataset(12, seed=5)
    a = train_toy_detector(data, epochs=2, seed=3)
    b = train_toy_detector(data, epochs=2, seed=3)
    assert a.checksum() == b.checksum()
    assert all(not p.requires_grad for p in a.model.parameters())
    with pytest.raises(ValueError):
        train_toy_detector([], epochs=1)
    with pytest.raises(ConvergenceFailure):
        train_toy_detector(data, epochs=1, seed=0, val=data, min_ap=0.99)


def test_checkpoint_round_trip(tmp_path):
    ad = untrained("two_stage", seed=4)
    path = save_checkpoint(ad, tmp_path / "d.npz")
    back = load_adapter(path)
    assert back.checksum() == ad.checksum() and back.architecture_family == "two_stage"
    img = np.random.default_rng(0).random((112, 112, 3)).astype(np.float32)
    assert torch.equal(ad.predict(img).scores, back.predict(img).scores)
    (tmp_path / "spec.json").write_text(json.dumps({"type": "toy", "checkpoint": str(path)}))
    assert load_adapter(tmp_path / "spec.json").checksum() == ad.checksum()
    (tmp_path / "bad.npz").write_bytes(b"junk")
    with pytest.raises(AdapterFailure):
        load_checkpoint(tmp_path / "bad.npz")


# --- candidate matching -------------------------------------------------------

def brute_force_pairs(boxes, gts, thresh=0.5):
    pairs = []
    for k, b in enumerate(boxes):
        scores = [pairwise_iou(b, g)[0, 0] for g in gts]
        j = int(np.argmax(scores))
        if scores[j] >= thresh:
            pairs.append((k, j))
    return pairs


def test_match_candidates_examples():
    gt = np.array([[0.3, 0.3, 0.2, 0.2], [0.7, 0.7, 0.2, 0.4]])
    assert match_candidates(np.zeros((0, 4)), gt) == []
    assert match_candidates(gt[:1], gt) == [(0, 0)]
    cands = np.array([[0.31, 0.3, 0.2, 0.2],   # IoU ~0.9 with gt 0
                      [0.5, 0.5, 0.2, 0.2],    # overlaps neither enough
                      [0.7, 0.75, 0.2, 0.3]])  # IoU 0.75 with gt 1
    assert match_candidates(cands, gt) == brute_force_pairs(cands, gt) == [(0, 0), (2, 1)]


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_match_candidates_oracle(seed):
    rng = np.random.default_rng(seed)
    gts = rng.uniform([0.2, 0.2, 0.1, 0.1], [0.8, 0.8, 0.4, 0.4], (rng.integers(1, 4), 4))
    cands = np.concatenate([gts[rng.integers(len(gts), size=5)] + rng.normal(0, 0.04, (5, 4)) * [1, 1, 0.3, 0.3],
                            rng.uniform([0.2, 0.2, 0.1, 0.1], [0.8, 0.8, 0.4, 0.4], (3, 4))])
    cands[:, 2:] = np.abs(cands[:, 2:]) + 0.01
    pairs = match_candidates(cands, gts)
    assert pairs == brute_force_pairs(cands, gts)
    for k, j in pairs:
        assert 0 <= k < len(cands) and pairwise_iou(cands[k], gts[j])[0, 0] >= 0.5


def test_match_candidates_accepts_predictions():
    boxes = torch.tensor([[0.3, 0.3, 0.2, 0.2]], dtype=torch.float64)
    p = DetectorPredictions(torch.tensor([[0.9, 0.1]]), boxes, torch.tensor([0.9]))
    assert match_candidates(p, boxes.numpy()) == [(0, 0)]


# --- external adapters ---------------------------------------------------------

def test_external_adapter_via_factory():
    ad = load_adapter({"type": "external", "name": "fake", "factory": "test_detector:fake_detector"})
    assert isinstance(ad, ExternalAdapter) and not ad.supports_gradients
    boxes, scores = ad.detect(np.full((8, 8, 3), 0.5))
    np.testing.assert_allclose(boxes, [[0.5, 0.5, 0.2, 0.4]])
    np.testing.assert_allclose(scores, [0.5])
    boxes, scores = ad.detect(np.zeros((8, 8, 3)))
    assert len(boxes) == 0  # below the evaluation floor


def test_external_adapter_failures():
    def broken(image):
        raise RuntimeError("model crashed")
    with pytest.raises(AdapterFailure, match="model crashed"):
        ExternalAdapter("b", broken).predict(np.zeros((4, 4, 3)))
    with pytest.raises(AdapterFailure, match="malformed"):
        ExternalAdapter("m", lambda im: [{"score": 1.0}]).predict(np.zeros((4, 4, 3)))
    with pytest.raises(AdapterFailure):
        load_adapter({"type": "external", "factory": "no_such_module:f"})
    with pytest.raises(AdapterFailure):
        load_adapter({"type": "carrier-pigeon"})


class _Handler(BaseHTTPRequestHandler):
    def do_POST(self):
        body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
        assert "image" in body
        out = json.dumps({"detections": [{"box": [0.4, 0.4, 0.2, 0.2], "score": 0.8}]}).encode()
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(out)))
        self.end_headers()
        self.wfile.write(out)

    def log_message(self, *args):
        pass


def test_http_adapter_round_trip():
    server = HTTPServer(("127.0.0.1", 0), _Handler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    try:
        ad = load_adapter({"type": "http", "name": "remote", "endpoint": f"http://127.0.0.1:{server.server_port}/"})
        assert isinstance(ad, HttpAdapter)
        boxes, scores = ad.detect(np.zeros((16, 16, 3)))
        np.testing.assert_allclose(scores, [0.8])
    finally:
        server.shutdown()
        server.server_close()
    with pytest.raises(AdapterFailure):
        HttpAdapter("dead", f"http://127.0.0.1:{server.server_port}/", timeout=1.0).predict(np.zeros((4, 4, 3)))


# --- trained detector -----------------------------------------------------------

def test_trained_detector_finds_single_person(trained_detector, desk_splits):
    _, val = desk_splits
    singles = [e for e in val.entries if len(e.person_boxes) == 1]
    assert singles
    hits = 0
    for e in singles:
        p = trained_detector.predict(e.image)
        ious = pairwise_iou(p.boxes, e.person_boxes[0].as_array())[:, 0]
        hits += bool(np.any((p.scores.numpy() > 0.5) & (ious > 0.5)))
    # every held-out single-person scene is not guaranteed; the bulk must be
    assert hits >= 0.9 * len(singles)


def test_trained_detector_clean_scene_example(trained_detector):
    from advtee.data import SceneConfig, synth_scene

    e = synth_scene(2024, SceneConfig(min_persons=1, max_persons=1, max_distractors=0))
    p = trained_detector.predict(e.image)
    ious = pairwise_iou(p.boxes, e.person_boxes[0].as_array())[:, 0]
    assert np.any((p.scores.numpy() > 0.5) & (ious > 0.5))


def test_trained_detector_quiet_without_people(trained_detector, desk_splits):
    _, val = desk_splits
    empty = [e for e in val.entries if not e.person_boxes]
    assert empty
    for e in empty:
        assert float(trained_detector.predict(e.image).scores.max()) <= 0.5


def test_detector_input_gradient_matches_fd(trained_detector, desk_splits):
    _, val = desk_splits
    e = next(e for e in val.entries if len(e.person_boxes) == 1)
    model = copy.deepcopy(trained_detector.model).double()
    ad = ToyAdapter(model)
    box = e.person_boxes[0]
    r0, c0 = int(box.cy * 112) - 4, int(box.cx * 112) - 4
    base = torch.as_tensor(e.image, dtype=torch.float64)

    def f(crop):
        img = base.clone()
        img[r0:r0 + 8, c0:c0 + 8] = crop
        return ad.predict(img).scores.sum()

    crop = base[r0:r0 + 8, c0:c0 + 8].clone().requires_grad_(True)
    f(crop).backward()
    fd = central_fd(f, crop.detach(), step=1e-5)
    assert float(crop.grad.abs().max()) > 0
    assert rel_error(crop.grad, fd) < 1e-3
