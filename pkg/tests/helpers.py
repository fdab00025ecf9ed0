"""Shared builders for the test suite."""

import numpy as np

from anomstream.model import ModelParams
from anomstream.schema import Catalog, Event
from anomstream import train as tr


def make_catalog(n_users=6, n_hosts=5, step=0):
    """Two entity types; one 2-ary and one 3-ary event type."""
    cat = Catalog()
    cat.register_entity_type("user")
    cat.register_entity_type("host")
    cat.register_event_type("login", ("user", "host"))
    cat.register_event_type("transfer", ("user", "host", "host"))
    for u in range(n_users):
        cat.intern_entity(0, f"u{u}", step)
    for h in range(n_hosts):
        cat.intern_entity(1, f"h{h}", step)
    return cat


def random_events(cat, n, rng, t=0):
    """Mix of login/transfer events with uniformly drawn entities."""
    nu = cat.n_entities(0)
    nh = cat.n_entities(1)
    events = []
    for _ in range(n):
        if rng.random() < 0.5:
            ents = (int(rng.integers(nu)), int(rng.integers(nh)))
            events.append(Event(t, 0, ents))
        else:
            ents = (int(rng.integers(nu)), int(rng.integers(nh)),
                    int(rng.integers(nh)))
            events.append(Event(t, 1, ents))
    return events


def small_setup(seed=0, n_events=300, dim=6, n_users=6, n_hosts=5):
    """Catalog with counts, noise tables, random params, and events."""
    rng = np.random.default_rng(seed)
    cat = make_catalog(n_users, n_hosts)
    events = random_events(cat, n_events, rng)
    cat.accumulate_counts(events)
    noises = tr.build_noise_tables(cat)
    params = ModelParams.initialize(cat, dim, rng)
    return cat, events, noises, params


def draw_negatives(cat, event, noises, k, rng):
    """Fixed negatives per predicted position for one event."""
    spec = cat.event_spec(event.event_type)
    return {
        i: tr.sample_negatives(noises[(event.event_type, i)], k, rng).tolist()
        for i in range(2, spec.arity + 1)
    }


def one_type_catalog(n_prefix, n_cand, dim=None):
    """Single event type (prefix, cand); optional handcrafted flat params."""
    cat = Catalog()
    cat.register_entity_type("prefix")
    cat.register_entity_type("cand")
    cat.register_event_type("pair", ("prefix", "cand"))
    for i in range(n_prefix):
        cat.intern_entity(0, f"p{i}", 0)
    for i in range(n_cand):
        cat.intern_entity(1, f"c{i}", 0)
    return cat


def fd_gradients(params, cat, ev, negs, noises, h=1e-5):
    """Central finite differences of the reference loss over every parameter
    the event touches."""
    def loss():
        return tr.mtl_event_loss(params, cat, ev, negs, noises)

    spec = cat.event_spec(ev.event_type)
    tp = params.type_params[ev.event_type]
    rows = sorted({cat.global_row(spec.signature[j], v)
                   for j, v in enumerate(ev.entities)}
                  | {cat.global_row(spec.signature[i - 1], n)
                     for i in range(2, spec.arity + 1) for n in negs[i]})
    g_emb = np.zeros_like(params.embeddings)
    for r in rows:
        for c in range(params.dim):
            orig = params.embeddings[r, c]
            params.embeddings[r, c] = orig + h
            up = loss()
            params.embeddings[r, c] = orig - h
            down = loss()
            params.embeddings[r, c] = orig
            g_emb[r, c] = (up - down) / (2 * h)
    g_w = {}
    for i in range(2, spec.arity + 1):
        w = tp.weights[i - 2]
        g = np.zeros_like(w)
        for j in range(len(w)):
            orig = w[j]
            w[j] = orig + h
            up = loss()
            w[j] = orig - h
            down = loss()
            w[j] = orig
            g[j] = (up - down) / (2 * h)
        g_w[(ev.event_type, i)] = g
    g_beta = np.zeros_like(tp.beta)
    for c in range(params.dim):
        orig = tp.beta[c]
        tp.beta[c] = orig + h
        up = loss()
        tp.beta[c] = orig - h
        down = loss()
        tp.beta[c] = orig
        g_beta[c] = (up - down) / (2 * h)
    g_ls = np.zeros_like(tp.log_sigma)
    for i in range(len(tp.log_sigma)):
        orig = tp.log_sigma[i]
        tp.log_sigma[i] = orig + h
        up = loss()
        tp.log_sigma[i] = orig - h
        down = loss()
        tp.log_sigma[i] = orig
        g_ls[i] = (up - down) / (2 * h)
    return g_emb, g_w, g_beta, g_ls


def rel_err(a, b):
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-8)
    return np.linalg.norm(np.asarray(a) - np.asarray(b)) / denom


def oracle_roc(scores, labels, max_fpr):
    """Independent O(n^2) construction: enumerate every distinct threshold,
    count fp/tp from scratch, integrate the same trapezoid geometry."""
    n_pos = sum(1 for l in labels if l == 1)
    n_neg = len(labels) - n_pos
    vertices = [(0.0, 0.0)]
    for th in sorted(set(scores), reverse=True):
        fp = sum(1 for s, l in zip(scores, labels) if s >= th and l == 0)
        tp = sum(1 for s, l in zip(scores, labels) if s >= th and l == 1)
        vertices.append((fp / n_neg, tp / n_pos))
    area = 0.0
    px, py = 0.0, 0.0
    pts = [(0.0, 0.0)]
    for x, y in vertices[1:]:
        if x <= max_fpr:
            area += (x - px) * (y + py) / 2.0
            pts.append((x, y))
            px, py = x, y
        else:
            frac = (max_fpr - px) / (x - px)
            yi = py + frac * (y - py)
            area += (max_fpr - px) * (yi + py) / 2.0
            if (max_fpr, yi) != pts[-1]:
                pts.append((max_fpr, yi))
            break
    return pts, area / max_fpr
