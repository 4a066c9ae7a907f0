"""Small shared fixtures for building tiny datasets and bundles."""

from emtm import data as D
from emtm.student_net import ModelConfig

TEACHERS = [D.SimulatedTeacherSpec("span", 0.5), D.SimulatedTeacherSpec("map2d", 1.0),
            D.SimulatedTeacherSpec("proposals", 2.0)]


def tiny_config(**kw):
    base = dict(d=8, n=6, d_v=5, d_q=4, m_max=4, heads=2, conv_kernel=3, dropout=0.0, seed=0)
    base.update(kw)
    return ModelConfig(**base)


def tiny_dataset(n=6, train=8, val=4, test=4, seed=0, snr=2.0):
    spec = D.SyntheticSpec(train=train, val=val, test=test, n=n, d_v=5, d_q=4, m_min=2, m_max=4,
                           snr=snr, min_fraction=0.3, max_fraction=0.7, seed=seed)
    return D.generate_dataset(spec)


def tiny_arrays(dataset, tspecs=TEACHERS, split="train", m_max=4, seed=0):
    samples = dataset[split]
    banks = None
    if tspecs:
        banks = [D.unify_rows(rows) for rows in D.simulate_teachers(samples, tspecs, seed)]
    return D.pack(samples, m_max, banks)
