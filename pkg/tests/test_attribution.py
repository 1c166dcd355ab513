import numpy as np
import pytest

import vqa_attrib.attribution as attr
from vqa_attrib import tensor as T
from vqa_attrib.attribution import (
    ImportanceMap,
    MapSource,
    OcclusionConfig,
    cell_aggregate,
    drop_token,
    grid_cells,
    guided_bp_attribute,
    occlusion_attribute_image,
    occlusion_attribute_words,
    random_map,
)
from vqa_attrib.data import ANSWERS, VOCAB, generate_dataset
from vqa_attrib.model import forward, init_model, predict_images
from vqa_attrib.tensor import ReluMode, Tape

V, A = len(VOCAB), len(ANSWERS)
W = {w: i for i, w in enumerate(VOCAB)}


@pytest.fixture(scope="module")
def model():
    m = init_model(V, A, seed=13)
    m.patch_value = np.array([0.2, 0.15, 0.1], dtype=np.float32)
    return m


@pytest.fixture(scope="module")
def examples():
    return generate_dataset(6, 17).examples


def brute_force_occlusion(model, image, question, patch, rows=16, cols=16):
    """Each masked image built from scratch and pushed through its own forward call."""
    p0 = forward(model, image, question)[0]
    h, w = image.shape[1:]
    ch, cw = h // rows, w // cols
    scores = np.zeros((rows, cols))
    for r in range(rows):
        for c in range(cols):
            masked = np.array(image, copy=True)
            for y in range(r * ch, (r + 1) * ch):
                for x in range(c * cw, (c + 1) * cw):
                    masked[:, y, x] = patch
            scores[r, c] = p0.predicted_prob - forward(model, masked, question)[0].probabilities[p0.predicted]
    return scores


class TestGuided:
    def test_zero_image_zero_map(self):
        m = init_model(V, A, seed=1)
        pix, words = guided_bp_attribute(m, np.zeros((3, 32, 32), np.float32), [1, 2, 3, 4, 8])
        assert pix.dims == (32, 32)
        assert np.all(pix.grid == 0)
        assert np.all(words.scores == 0)

    def test_scores_nonnegative(self, model, examples):
        for ex in examples:
            pix, words = guided_bp_attribute(model, ex.image, ex.question)
            assert pix.dims == (32, 32) and pix.source is MapSource.GUIDED
            assert np.all(pix.grid >= 0)
            assert np.all(words.scores >= 0)
            assert len(words.scores) == len(ex.question)

    def test_seeded_on_predicted_probability(self, model, examples):
        ex = examples[0]
        dist, tape = forward(model, ex.image, ex.question, relu_mode=ReluMode.GUIDED)
        grads = T.backward(tape, T.select(tape["probs"], (0, dist.predicted)))
        pix, words = guided_bp_attribute(model, ex.image, ex.question)
        np.testing.assert_array_equal(pix.grid, np.abs(grads["image"][0]).sum(axis=0))
        np.testing.assert_allclose(words.scores, np.linalg.norm(grads["tokens"].astype(np.float64), axis=1))

    def test_linf_and_logit_options(self, model, examples):
        ex = examples[1]
        dist, tape = forward(model, ex.image, ex.question, relu_mode=ReluMode.GUIDED)
        grads = T.backward(tape, T.select(tape["logits"], (0, dist.predicted)))
        _, words = guided_bp_attribute(model, ex.image, ex.question, word_norm="linf", seed_target="logit")
        np.testing.assert_array_equal(words.scores, np.abs(grads["tokens"]).max(axis=1))
        with pytest.raises(ValueError):
            guided_bp_attribute(model, ex.image, ex.question, word_norm="l1")

    def test_repeated_tokens_share_score(self, model, examples):
        q = [W["red"], W["red"], W["square"]]
        _, words = guided_bp_attribute(model, examples[0].image, q)
        assert words.scores[0] == words.scores[1]

    def test_differs_from_classical(self, model, examples):
        ex = examples[2]
        g, _ = guided_bp_attribute(model, ex.image, ex.question)
        c, _ = guided_bp_attribute(model, ex.image, ex.question, relu_mode=ReluMode.CLASSICAL)
        assert not np.array_equal(g.grid, c.grid)


@pytest.mark.parametrize("seed", range(5))
def test_guided_matches_straight_line_reference(seed):
    """Four-layer ReLU net: tape-based guided backward vs. a hand-written one."""
    rng = np.random.default_rng(seed)
    sizes = [6, 7, 5, 6, 4]
    Ws = [rng.normal(size=(sizes[i + 1], sizes[i])) for i in range(4)]
    bs = [rng.normal(size=sizes[i + 1]) for i in range(4)]
    x = rng.normal(size=(1, sizes[0]))
    out_index = int(rng.integers(sizes[-1]))

    # reference forward
    acts, pre = [x], []
    for i in range(4):
        z = acts[-1] @ Ws[i].T + bs[i]
        pre.append(z)
        acts.append(np.maximum(z, 0) if i < 3 else z)
    # reference guided backward: at each ReLU keep only positive gradient where input > 0
    g = np.zeros_like(acts[-1])
    g[0, out_index] = 1.0
    g = g @ Ws[3]
    for i in (2, 1, 0):
        g = np.where((pre[i] > 0) & (g > 0), g, 0.0)
        g = g @ Ws[i]

    tape = Tape(ReluMode.GUIDED, np.float64)
    h = xt = tape.leaf(x)
    for i in range(4):
        h = T.linear(h, tape.leaf(Ws[i]), tape.leaf(bs[i]))
        if i < 3:
            h = T.relu(h)
    grads = T.backward(tape, T.select(h, (0, out_index)))
    np.testing.assert_allclose(grads[xt], g, rtol=1e-12, atol=1e-15)


class TestOcclusion:
    def test_grid_cells(self):
        cells = grid_cells(32, 32, 16, 16)
        assert len(cells) == 256
        assert cells[0] == (0, 2, 0, 2) and cells[17] == (2, 4, 2, 4)
        clipped = grid_cells(5, 5, 2, 2)
        assert clipped[-1] == (3, 5, 3, 5)

    def test_matches_brute_force(self, model, examples):
        for ex in examples[:3]:
            imap = occlusion_attribute_image(model, ex.image, ex.question)
            ref = brute_force_occlusion(model, ex.image, ex.question, model.patch_value)
            assert imap.dims == (16, 16) and imap.source is MapSource.OCCLUSION
            np.testing.assert_allclose(imap.grid, ref, atol=1e-6)

    def test_forward_count(self, model, examples, monkeypatch):
        seen = []

        def spy(m, images, question):
            seen.append(len(images))
            return predict_images(m, images, question)

        monkeypatch.setattr(attr, "predict_images", spy)
        occlusion_attribute_image(model, examples[0].image, examples[0].question)
        assert sum(seen) == 256 + 1

    def test_identity_patch_scores_zero(self, model):
        image = np.full((3, 32, 32), 0.3, dtype=np.float32)
        image[:, 10:20, 10:20] = [[[0.9]], [[0.1]], [[0.1]]]
        cfg = OcclusionConfig(patch_value=np.array([0.3, 0.3, 0.3], np.float32))
        imap = occlusion_attribute_image(model, image, [1, 2, 3, 4, 8], cfg)
        cells = grid_cells(32, 32, 16, 16)
        for k, (r0, r1, c0, c1) in enumerate(cells):
            if r1 <= 10 or r0 >= 20 or c1 <= 10 or c0 >= 20:
                # batched and single forwards may round differently in float32
                assert abs(imap.grid.flat[k]) <= 1e-6
        assert np.abs(imap.grid).max() > 1e-4

    def test_original_untouched_and_bounds(self, model, examples):
        ex = examples[1]
        before = ex.image.copy()
        imap = occlusion_attribute_image(model, ex.image, ex.question)
        assert ex.image.tobytes() == before.tobytes()
        p = forward(model, ex.image, ex.question)[0].predicted_prob
        assert np.all(imap.grid <= p + 1e-7) and np.all(imap.grid >= p - 1 - 1e-7)

    def test_patch_override(self, model, examples):
        ex = examples[0]
        a = occlusion_attribute_image(model, ex.image, ex.question)
        b = occlusion_attribute_image(model, ex.image, ex.question,
                                      OcclusionConfig(patch_value=np.array([123.68, 116.779, 103.939]) / 255))
        assert not np.array_equal(a.grid, b.grid)
        with pytest.raises(ValueError):
            occlusion_attribute_image(model, ex.image, ex.question, OcclusionConfig(patch_value=[np.nan, 0, 0]))


class TestWordOcclusion:
    def test_drop_token(self):
        q = [W[w] for w in ["what", "color", "is", "the", "square"]]
        assert drop_token(q, 1) == [W[w] for w in ["what", "is", "the", "square"]]
        assert drop_token([W["red"]], 0) == [0]

    def test_fed_questions(self, model, examples, monkeypatch):
        fed = []

        def spy(m, images, question):
            fed.append(list(question))
            return predict_images(m, images, question)

        monkeypatch.setattr(attr, "predict_images", spy)
        q = [W[w] for w in ["what", "color", "is", "the", "square"]]
        occlusion_attribute_words(model, examples[0].image, q)
        assert fed[0] == q
        assert fed[2] == [W[w] for w in ["what", "is", "the", "square"]]
        assert len(fed) == 1 + len(q)

    def test_duplicate_tokens_identical_scores(self, model, examples):
        words = occlusion_attribute_words(model, examples[0].image, [W["red"], W["red"]])
        assert words.scores[0] == words.scores[1]

    def test_matches_brute_force(self, model, examples):
        for ex in examples:
            words = occlusion_attribute_words(model, ex.image, ex.question)
            p0 = forward(model, ex.image, ex.question)[0]
            for t in range(len(ex.question)):
                q = ex.question[:t] + ex.question[t + 1:]
                p = forward(model, ex.image, q)[0].probabilities[p0.predicted]
                assert abs(words.scores[t] - (p0.predicted_prob - p)) <= 1e-6

    def test_single_token_uses_pad(self, model, examples):
        words = occlusion_attribute_words(model, examples[0].image, [W["red"]])
        p0 = forward(model, examples[0].image, [W["red"]])[0]
        p = forward(model, examples[0].image, [0])[0].probabilities[p0.predicted]
        assert words.scores[0] == pytest.approx(p0.predicted_prob - p, abs=1e-7)


def test_attribution_leaves_model_untouched(model, examples):
    before = {k: v.tobytes() for k, v in model.params.items()}
    ex = examples[0]
    guided_bp_attribute(model, ex.image, ex.question)
    occlusion_attribute_image(model, ex.image, ex.question)
    occlusion_attribute_words(model, ex.image, ex.question)
    assert {k: v.tobytes() for k, v in model.params.items()} == before


def test_attribution_deterministic(model, examples):
    ex = examples[3]
    a = occlusion_attribute_image(model, ex.image, ex.question).grid
    b = occlusion_attribute_image(model, ex.image, ex.question).grid
    assert a.tobytes() == b.tobytes()
    g1, _ = guided_bp_attribute(model, ex.image, ex.question)
    g2, _ = guided_bp_attribute(model, ex.image, ex.question)
    assert g1.grid.tobytes() == g2.grid.tobytes()


class TestRandomMap:
    def test_deterministic(self):
        assert random_map(3).grid.tobytes() == random_map(3).grid.tobytes()
        assert random_map(3).grid.tobytes() != random_map(4).grid.tobytes()

    def test_range_and_dims(self):
        m = random_map(0, (16, 16))
        assert m.dims == (16, 16) and m.source is MapSource.RANDOM
        assert np.all((m.grid >= 0) & (m.grid < 1))

    def test_monte_carlo_mean(self):
        means = [random_map(s, (16, 16)).grid.mean() for s in range(1000)]
        assert abs(np.mean(means) - 0.5) <= 0.01


class TestCellAggregate:
    def test_constant(self):
        m = cell_aggregate(ImportanceMap(np.full((32, 32), 2.5), MapSource.GUIDED))
        assert m.dims == (16, 16) and np.all(m.grid == 2.5)

    def test_single_pixel(self):
        g = np.zeros((32, 32))
        g[5, 9] = 4.0
        m = cell_aggregate(ImportanceMap(g, MapSource.GUIDED)).grid
        assert m[2, 4] == 1.0 and m.sum() == 1.0

    def test_block_mean_oracle(self):
        g = np.random.default_rng(0).random((32, 32))
        m = cell_aggregate(ImportanceMap(g, MapSource.GUIDED)).grid
        ref = np.array([[np.mean([g[2 * r + i, 2 * c + j] for i in (0, 1) for j in (0, 1)])
                         for c in range(16)] for r in range(16)])
        np.testing.assert_allclose(m, ref, rtol=1e-12)


class TestSerialisation:
    def test_json_round_trip(self):
        m = random_map(5)
        back = ImportanceMap.from_json(m.to_json())
        assert back.dims == (16, 16) and back.source is MapSource.RANDOM
        np.testing.assert_array_equal(back.grid, m.grid)

    def test_json_dims_checked(self):
        with pytest.raises(ValueError):
            ImportanceMap.from_json('{"source": "random", "dims": [2, 2], "scores": [1, 2, 3]}')

    def test_pgm(self):
        g = np.array([[0.0, 1.0], [2.0, 4.0]])
        data = ImportanceMap(g, MapSource.OCCLUSION).to_pgm()
        header = b"P5\n2 2\n255\n"
        assert data.startswith(header)
        assert list(data[len(header):]) == [0, 64, 128, 255]

    def test_pgm_constant(self):
        data = ImportanceMap(np.full((3, 2), 7.0), MapSource.OCCLUSION).to_pgm()
        assert data == b"P5\n2 3\n255\n" + bytes(6)
