"""Scratch calibration harness (not part of the package)."""
import sys
import numpy as np
from nwlearn.rng import Rng
import nwlearn.scmgen as sg
from nwlearn.trainer import TrainConfig, train
from nwlearn.infer import InferenceMode, build_cache, predict
from nwlearn.metrics import compute_metric


def make_cfg(delta_s, a, skew, flip, rng, content=0.95):
    content_dir = np.array([0.5, 0.5, 0.5, 0.5])
    content_means = np.stack([-content * content_dir, content * content_dir])
    # OOD envs reuse training signatures with different priors/associations
    offs = {0: np.array([a, 0., 0.]), 1: np.zeros(3), 2: np.array([-a, 0., 0.]),
            3: np.array([-a, 0., 0.]), 4: np.array([a, 0., 0.])}
    style_means = np.zeros((2, 5, 4))
    for env in range(5):
        for cls in (0, 1):
            sign = 2.0 * cls - 1.0
            s = sign * delta_s
            if env >= 3:
                s = -sign * delta_s if flip else float(rng.normal(0, 0.1 * delta_s))
            style_means[cls, env, 0] = s
            style_means[cls, env, 1:] = offs[env]
    priors = np.array([[skew, 1-skew], [0.5, 0.5], [1-skew, skew], [0.5, 0.5], [0.5, 0.5]])
    return sg.ScmConfig(np.full(5, 0.2), priors, content_means, style_means, 0.5,
                        sg.random_mix_matrix(8, 16, rng), (3, 4))


def data(delta_s, a, skew, flip=True, seed=0):
    rng = Rng(seed)
    cfg = make_cfg(delta_s, a, skew, flip, rng)
    tr = sg.sample_dataset(cfg, 3000, (0, 1, 2), rng)
    va = sg.sample_dataset(cfg, 600, [3], rng)
    te = sg.sample_dataset(cfg, 1200, [4], rng)
    return tr, va, te


def run(tr, va, te, variant, seed, epochs=16, lr=3e-3, **kw):
    c = TrainConfig(variant=variant, max_epochs=epochs, lr=lr, eval_every=25, seed=seed, **kw)
    model, report = train(tr, va, c)
    net = model if variant.startswith('nw') else model.net
    if variant.startswith('nw'):
        cache = build_cache(net, tr)
        probs = predict(InferenceMode('full'), cache, net.extract(te.X).data)
    else:
        probs = model.predict_probs(te.X)
    return compute_metric(probs, te.y, te.e, 'accuracy')


if __name__ == "__main__":
    delta_s, a, skew = float(sys.argv[1]), float(sys.argv[2]), float(sys.argv[3])
    epochs = int(sys.argv[4]) if len(sys.argv) > 4 else 16
    variants = sys.argv[5].split(',') if len(sys.argv) > 5 else ['erm', 'nw_balanced', 'nw_implicit']
    tr, va, te = data(delta_s, a, skew)
    print('style oracle train', round(sg.latent_oracle_accuracy(tr, tr, 'style'), 3),
          'flip test', round(sg.latent_oracle_accuracy(tr, te, 'style'), 3), flush=True)
    for variant in variants:
        accs = [run(tr, va, te, variant, s, epochs=epochs) for s in (1, 2, 3, 4, 5)]
        print(f'{variant}: mean {np.mean(accs):.3f}  {[round(x, 3) for x in accs]}', flush=True)
