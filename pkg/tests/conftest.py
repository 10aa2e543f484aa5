import numpy as np
import pytest

from deduce import classifier, feature_density, nn_core
from deduce.data_io import SyntheticSpec, generate_synthetic


def small_net(seed, input_dim=6, num_classes=3, feature_dim=5, hidden_dim=7,
              num_blocks=2, sn=False):
    """A tiny random network with weights large enough to exercise both leaky branches."""
    return nn_core.init_network(input_dim, num_classes, feature_dim=feature_dim,
                                hidden_dim=hidden_dim, num_blocks=num_blocks,
                                sn=sn, sn_head=sn, seed=seed)


@pytest.fixture(scope="session")
def synthetic():
    data = generate_synthetic(SyntheticSpec())
    return data.split(0.2, 0)


@pytest.fixture(scope="session")
def trained(synthetic):
    """Default-config model on the default synthetic glyphs, with its GMM."""
    train_set, test_set = synthetic
    model = classifier.train(train_set, classifier.TrainConfig(), test_set)
    feats = classifier.extract_features_batch(model, train_set.images)
    gmm = feature_density.fit(feats, train_set.labels, train_set.class_count)
    model.gmm = feature_density.with_threshold(gmm, feats)
    return model


def linear_model(head_w, head_b, proj=None):
    """No residual blocks: features = proj @ x, logits = head_w @ features + head_b."""
    head_w = np.asarray(head_w, dtype=np.float64)
    d = head_w.shape[1]
    proj = np.eye(d) if proj is None else np.asarray(proj, dtype=np.float64)
    params = nn_core.NetworkParams(
        nn_core.LayerParams(proj, np.zeros(proj.shape[0])),
        [],
        nn_core.LayerParams(head_w, np.asarray(head_b, dtype=np.float64)),
    )
    return classifier.TrainedModel(params, head_w.shape[0])


ACCEPTANCE_LINES = []


def record_criterion(number, passed, detail):
    line = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
