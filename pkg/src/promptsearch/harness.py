"""Two-stage protocol orchestration: detection pre-training, sequential
continual learning, evaluation, metrics reports and checkpoints.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import tensor as T
from .backbone import Backbone, BackboneConfig, Linear
from .checkpoint import array_digest, load_checkpoint, save_checkpoint
from .data import (IMAGE_SIZE, domain_separation_probe, make_detection_corpus,
                   make_domain)
from .detection import (Box, DetectionHead, SimpleFeaturePyramid, decode_boxes,
                        detection_loss, iou, roi_align)
from .metrics import (detection_pr, forgetting_matrix, retrieval_ap,
                      weighted_average)
from .oim import UNLABELED, OimState, oim_loss, oim_update
from .prompt_pool import (PromptPool, attribute_loss, diversity_loss,
                          select_domain)
from .tensor import Tensor

METRIC_KEYS = ("detection_ap", "detection_recall", "map", "top1")
EVAL_THREADS_ENV = "PROMPTSEARCH_EVAL_THREADS"


class ProtocolError(RuntimeError):
    """Raised when the sequential-training protocol is violated."""


class DomainView:
    """Access-recording window onto one domain's data.

    Training code receives only this view, so any attempt to read another
    domain is structurally impossible; tests inspect the recorder.
    """

    def __init__(self, domain_data, recorder=None):
        self._data = domain_data
        self.domain_id = domain_data.spec.domain_id
        self.recorder = recorder if recorder is not None else []

    def __len__(self):
        return len(self._data.train)

    def train_scene(self, index):
        self.recorder.append((self.domain_id, "train", index))
        return self._data.train[index]

    @property
    def train_ids(self):
        return self._data.train_ids

    def label_of(self, identity):
        return self._data.label_of(identity)


class PersonSearchSystem:
    """Frozen backbone + detection sub-network + prompt pool."""

    def __init__(self, config):
        self.config = config
        self.backbone_config = BackboneConfig()
        self.backbone = Backbone(self.backbone_config, seed=config.seed)
        self.pyramid = SimpleFeaturePyramid(self.backbone_config.stage_dims[-2],
                                            seed=config.seed)
        self.head = DetectionHead(seed=config.seed)
        self.pool = PromptPool(self.backbone_config.layer_dims(),
                               self.backbone_config.feature_dim,
                               seed=config.seed,
                               prompt_len=config.prompt_len,
                               num_attributes=config.num_attributes)
        self.image_size = IMAGE_SIZE

    # -- serialization -----------------------------------------------------

    def named_arrays(self):
        out = {}
        for name, p in self.backbone.named_params().items():
            out[f"backbone.{name}"] = p.data
        for name, p in self.pyramid.named_params().items():
            out[name] = p.data
        for name, p in self.head.named_params().items():
            out[name] = p.data
        for i, slot in enumerate(self.pool.slots):
            for name, p in slot.named_arrays(f"slot{i}").items():
                out[name] = p.data
        return out

    def load_arrays(self, arrays, num_domains):
        params = {}
        for name, p in self.backbone.named_params().items():
            params[f"backbone.{name}"] = p
        for name, p in self.pyramid.named_params().items():
            params[name] = p
        for name, p in self.head.named_params().items():
            params[name] = p
        for _ in range(num_domains):
            self.pool.add_domain()
            self.pool.finish_domain()
        for i, slot in enumerate(self.pool.slots):
            params.update(slot.named_arrays(f"slot{i}"))
        for name, p in params.items():
            p.data = np.array(arrays[name], dtype=p.data.dtype).reshape(p.data.shape)

    def backbone_digest(self):
        return {f"backbone.{n}": array_digest(p.data)
                for n, p in self.backbone.named_params().items()}

    def slot_digests(self, index):
        return {n: array_digest(p.data)
                for n, p in self.pool.slots[index].named_arrays(f"slot{index}").items()}

    # -- forward helpers -----------------------------------------------------

    def scene_forward(self, image, domain_id=None):
        """Trunk + pyramid + head for one image tensor; returns
        (trunk grid, head outputs per level)."""
        selector = self.pool.selector(domain_id) if domain_id is not None else None
        trunk = self.backbone.trunk_forward(image, selector)
        levels = self.pyramid(trunk)
        return trunk, [self.head(lv) for lv in levels]

    def person_feature(self, trunk, box, domain_id=None):
        selector = self.pool.selector(domain_id) if domain_id is not None else None
        roi = roi_align(trunk, box, self.backbone.trunk_scale, out_size=8)
        return self.backbone.tail_forward(roi, selector)

    def detect(self, head_outputs):
        return decode_boxes(head_outputs, self.image_size)


# -- stage A+B: detection pre-training ----------------------------------------


def pretrain(config, log=None):
    """Warm up the backbone on patch reconstruction, freeze it, then train
    the detection sub-network on the mixed-style corpus."""
    system = PersonSearchSystem(config)
    corpus = make_detection_corpus(config.seed, config.corpus_size)
    _warmup_backbone(system, corpus, config)
    system.backbone.freeze()

    params = system.pyramid.params() + system.head.params()
    opt = T.Adam(params, lr=config.pretrain_lr)
    batch = max(1, config.batch_size)
    aug_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 43]))
    for epoch in range(config.pretrain_epochs):
        # step decay so late epochs refine box regression
        opt.lr = config.pretrain_lr * (0.1 ** (epoch / max(1, config.pretrain_epochs - 1)))
        epoch_loss = 0.0
        for start in range(0, len(corpus), batch):
            opt.zero_grad()
            terms = []
            for scene in corpus[start:start + batch]:
                img, boxes = _random_flip(scene, aug_rng, system.image_size)
                _, outs = system.scene_forward(Tensor(img))
                terms.append(detection_loss(outs, boxes, system.image_size))
            loss = terms[0]
            for t in terms[1:]:
                loss = T.add(loss, t)
            loss = T.mul(loss, 1.0 / len(terms))
            loss.backward()
            opt.step()
            epoch_loss += loss.item()
        if log:
            log(f"pretrain epoch {epoch}: loss {epoch_loss / max(1, len(corpus) // batch):.4f}")
    for p in params:
        p.requires_grad = False
    return system


def _random_flip(scene, rng, image_size):
    """Horizontal/vertical flip augmentation for detection pre-training."""
    img, boxes = scene.image, list(scene.boxes)
    if rng.random() < 0.5:
        img = img[:, ::-1].copy()
        boxes = [Box(image_size - b.x2, b.y1, image_size - b.x1, b.y2) for b in boxes]
    if rng.random() < 0.5:
        img = img[::-1].copy()
        boxes = [Box(b.x1, image_size - b.y2, b.x2, image_size - b.y1) for b in boxes]
    return img, boxes


def _warmup_backbone(system, corpus, config):
    """Self-supervised stand-in for external pre-trained weights: masked patch
    reconstruction. Random cells are blanked in the input and must be rebuilt
    from their surroundings, which forces the attention pathways to carry
    information instead of degenerating into a per-cell identity map."""
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 41]))
    bb = system.backbone
    trunk_dim = system.backbone_config.stage_dims[-2]
    feat_dim = system.backbone_config.feature_dim
    scale = bb.trunk_scale
    trunk_dec = Linear(rng, trunk_dim, scale * scale * 3)
    tail_dec = Linear(rng, feat_dim, 4 * 4 * 3)
    params = bb.params() + trunk_dec.params() + tail_dec.params()
    opt = T.Adam(params, lr=1e-3)
    for step in range(config.warmup_steps):
        scene = corpus[step % len(corpus)]
        img = scene.image
        gh, gw = img.shape[0] // scale, img.shape[1] // scale
        target_trunk = img.reshape(gh, scale, gw, scale, 3
                                   ).transpose(0, 2, 1, 3, 4).reshape(gh, gw, -1)
        target_tail = img.reshape(4, img.shape[0] // 4, 4, img.shape[1] // 4, 3
                                  ).mean(axis=(1, 3)).reshape(-1)
        mask = rng.random((gh, gw)) < 0.4
        if not mask.any():
            mask[rng.integers(0, gh), rng.integers(0, gw)] = True
        masked = img.copy()
        cells = masked.reshape(gh, scale, gw, scale, 3).transpose(0, 2, 1, 3, 4)
        cells[mask] = 0.5
        masked = cells.transpose(0, 2, 1, 3, 4).reshape(img.shape)
        opt.zero_grad()
        trunk = bb.trunk_forward(Tensor(masked))
        rec1 = trunk_dec(trunk)
        d1 = T.mul(T.add(rec1, -target_trunk), mask[:, :, None].astype(float))
        denom = float(mask.sum()) * scale * scale * 3
        v = bb.tail_forward(trunk)
        rec2 = tail_dec(T.reshape(v, (1, -1)))
        d2 = T.add(rec2, -target_tail.reshape(1, -1))
        loss = T.add(T.mul(T.sum_(T.mul(d1, d1)), 1.0 / denom),
                     T.mean(T.mul(d2, d2)))
        loss.backward()
        opt.step()


# -- continual learning ---------------------------------------------------------


def train_continual(config, system, recorder=None, log=None):
    """Sequentially train one prompt slot per domain (or one shared slot in
    ft_seq mode). Returns per-stage evaluation history for forgetting."""
    specs = config.domain_specs()
    sizes = config.dataset_sizes()
    ft_seq = config.baseline == "ft_seq"
    history = []
    slot_digests = []
    datasets = {}

    for di, spec in enumerate(specs):
        domain = make_domain(spec, config.seed, sizes)
        datasets[di] = domain
        view = DomainView(domain, recorder)
        if ft_seq:
            slot_id = system.pool.add_domain() if di == 0 else 0
        else:
            slot_id = system.pool.add_domain()
        if slot_id != di and not ft_seq:
            raise ProtocolError(f"expected slot {di}, got {slot_id}")
        _train_domain(config, system, view, slot_id, ft_seq, log)
        if not ft_seq or di == len(specs) - 1:
            system.pool.finish_domain()
        slot_digests.append({i: system.slot_digests(i)
                             for i in range(system.pool.num_domains)})
        snapshot = {"after_domain": di, "metrics": {}}
        modes = ("ft_seq",) if ft_seq else ("pops", "oracle_selection")
        for mode in modes:
            frags = {}
            for j in range(di + 1):
                frags[str(j)] = evaluate_domain(system, datasets[j], mode)
            snapshot["metrics"][mode] = frags
        history.append(snapshot)
        if log:
            log(f"domain {di} done: {snapshot['metrics']}")
    return history, slot_digests


def _train_domain(config, system, view, slot_id, ft_seq, log=None):
    slot = system.pool.slots[slot_id]
    trainable = slot.prompts if ft_seq else slot.all_tensors()
    for p in trainable:
        p.requires_grad = True
    opt = T.Adam(trainable, lr=config.continual_lr)
    state = OimState(len(view.train_ids), system.backbone_config.feature_dim,
                     seed=config.seed)
    q_cache = {}
    n = len(view)
    batch = max(1, config.batch_size)
    for epoch in range(config.continual_epochs):
        for start in range(0, n, batch):
            opt.zero_grad()
            terms = []
            pending_updates = []
            for idx in range(start, min(start + batch, n)):
                scene = view.train_scene(idx)
                img = Tensor(scene.image)
                trunk, outs = system.scene_forward(img, domain_id=slot_id)
                loss = detection_loss(outs, scene.boxes, system.image_size)

                feats = [system.person_feature(trunk, b, domain_id=slot_id)
                         for b in scene.boxes]
                labels = [view.label_of(i) for i in scene.identities]
                loss = T.add(loss, oim_loss(feats, labels, state))

                with T.no_grad():
                    dets = system.detect(outs)
                    extra_feats, extra_labels = [], []
                    for d in dets:
                        best = max((iou(d, g) for g in scene.boxes), default=0.0)
                        if best < 0.3:
                            extra_feats.append(
                                system.person_feature(trunk.detach(), d, domain_id=slot_id))
                            extra_labels.append(UNLABELED)
                pending_updates.append((feats + extra_feats, labels + extra_labels))

                if not ft_seq:
                    if idx not in q_cache:
                        q_cache[idx] = Tensor(
                            system.backbone.query_encode(img).data.copy())
                    loss = T.add(loss, T.mul(attribute_loss(q_cache[idx], slot),
                                             config.lambda_attr))
                terms.append(loss)
            total = terms[0]
            for t in terms[1:]:
                total = T.add(total, t)
            total = T.mul(total, 1.0 / len(terms))
            if not ft_seq:
                total = T.add(total, T.mul(diversity_loss(slot), config.lambda_div))
            total.backward()
            opt.step()
            if not ft_seq:
                slot.renormalize_prototypes()
            for feats, labels in pending_updates:
                oim_update(feats, labels, state)


# -- evaluation ------------------------------------------------------------------


def evaluate_domain(system, domain, mode):
    """Detection, retrieval and selection metrics on one domain's test split.

    mode: 'pops' / 'ft_seq' select prompts via attribute matching;
    'oracle_selection' uses the true domain id.
    """
    if mode == "oracle_selection" and domain.spec.domain_id >= system.pool.num_domains:
        raise LookupError(f"domain {domain.spec.domain_id} not in pool")
    true_domain = domain.spec.domain_id
    threads = int(os.environ.get(EVAL_THREADS_ENV, "1"))

    with T.no_grad():
        def per_scene(scene):
            q = system.backbone.query_encode(Tensor(scene.image))
            sel = select_domain(q, system.pool)
            use = true_domain if mode == "oracle_selection" else sel
            trunk, outs = system.scene_forward(Tensor(scene.image), domain_id=use)
            boxes = system.detect(outs)
            feats = [np.asarray(system.person_feature(trunk, b, domain_id=use).data)
                     for b in boxes]
            return sel, use, boxes, feats, trunk

        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                results = list(pool.map(per_scene, domain.test))
        else:
            results = [per_scene(s) for s in domain.test]

        selections = [r[0] for r in results]
        det_per_image = [r[2] for r in results]
        gts_per_image = [s.boxes for s in domain.test]
        det_ap, det_recall = detection_pr(det_per_image, gts_per_image)
        sel_acc = float(np.mean([s == true_domain for s in selections])) if selections else 0.0

        aps, top1s = [], []
        for q, gallery in zip(domain.queries, domain.galleries):
            qscene = domain.test[q.scene_index]
            use = results[q.scene_index][1]
            trunk = results[q.scene_index][4]
            qfeat = np.asarray(system.person_feature(
                trunk, qscene.boxes[q.box_index], domain_id=use).data)
            qfeat = qfeat / (np.linalg.norm(qfeat) or 1.0)
            ranked = []
            for si in gallery:
                _, _, boxes, feats, _ = results[si]
                for bi, (b, f) in enumerate(zip(boxes, feats)):
                    fn = f / (np.linalg.norm(f) or 1.0)
                    ranked.append((float(qfeat @ fn), si, bi, b))
            ranked.sort(key=lambda t: (-t[0], t[1], t[2]))
            flags, claimed = [], set()
            for _, si, bi, b in ranked:
                scene = domain.test[si]
                hit = False
                for gi, (g, gid) in enumerate(zip(scene.boxes, scene.identities)):
                    if gid == q.identity and (si, gi) not in claimed and iou(b, g) > 0.5:
                        claimed.add((si, gi))
                        hit = True
                        break
                flags.append(hit)
            num_rel = sum(
                sum(1 for gid in domain.test[si].identities if gid == q.identity)
                for si in gallery)
            aps.append(retrieval_ap(flags, num_rel))
            top1s.append(1.0 if flags and flags[0] else 0.0)

    return {
        "detection_ap": det_ap,
        "detection_recall": det_recall,
        "map": float(np.mean(aps)) if aps else 0.0,
        "top1": float(np.mean(top1s)) if top1s else 0.0,
        "selection_accuracy": sel_acc,
    }


# -- reports ------------------------------------------------------------------


def build_report(config, history, mode, datasets=None, system=None):
    """Final MetricsReport: per-domain metrics (percent), weighted averages,
    forgetting matrix, selection accuracy."""
    final_stage = history[-1]["metrics"][mode]
    num = len(final_stage)
    per_domain = []
    for i in range(num):
        frag = final_stage[str(i)]
        per_domain.append({"domain": i, **{k: 100.0 * frag[k] for k in METRIC_KEYS},
                           "selection_accuracy": 100.0 * frag["selection_accuracy"]})
    weights = [config.gallery_size] * num
    weighted = {k: weighted_average([d[k] for d in per_domain], weights)
                for k in METRIC_KEYS}
    own = [history[i]["metrics"][mode][str(i)] for i in range(num)]
    final = [final_stage[str(i)] for i in range(num)]
    forgetting = [
        {"domain": i, **{k: 100.0 * row[k] for k in METRIC_KEYS}}
        for i, row in enumerate(forgetting_matrix(own, final, METRIC_KEYS))
    ]
    return {
        "mode": mode,
        "config": config.to_dict(),
        "per_domain": per_domain,
        "weighted_average": weighted,
        "forgetting": forgetting,
        "history": history,
    }


def report_to_csv(report):
    """One row per (domain, metric, stage)."""
    lines = ["domain,metric,stage,value"]
    for d in report["per_domain"]:
        for k in METRIC_KEYS + ("selection_accuracy",):
            lines.append(f"{d['domain']},{k},final,{d[k]:.6f}")
    for row in report["forgetting"]:
        for k in METRIC_KEYS:
            lines.append(f"{row['domain']},{k},forgetting,{row[k]:.6f}")
    for snap in report["history"]:
        stage = f"after_domain_{snap['after_domain']}"
        frags = snap["metrics"][report["mode"]]
        for dom, frag in sorted(frags.items()):
            for k in METRIC_KEYS:
                lines.append(f"{dom},{k},{stage},{100.0 * frag[k]:.6f}")
    return "\n".join(lines) + "\n"


# -- checkpoint plumbing -----------------------------------------------------


def save_system(path, system, config, stage, history=None, slot_digests=None):
    manifest = {
        "config": config.to_dict(),
        "stage": stage,
        "num_domains": system.pool.num_domains,
        "history": history or [],
        "slot_digests": slot_digests or [],
        "backbone_digest": system.backbone_digest(),
    }
    save_checkpoint(path, system.named_arrays(), manifest)


def load_system(path):
    from .config import config_from_dict

    arrays, manifest = load_checkpoint(path)
    raw = dict(manifest["config"])
    system = PersonSearchSystem(config_from_dict(raw))
    system.backbone.freeze()
    for p in system.pyramid.params() + system.head.params():
        p.requires_grad = False
    system.load_arrays(arrays, manifest["num_domains"])
    return system, manifest
