#!/usr/bin/env python3
"""Regenerate the frozen reference fixtures under crates/core/tests/fixtures/.

This is an independent NumPy implementation of the COCO mask conventions
(column-major RLE, the compressed-string codec, and the standard mask AP
evaluation protocol). The Rust crate is tested against the values this script
produces; the script itself is sanity-checked by round-tripping its own codec
and by a handful of published reference values embedded as assertions.

Usage: python3 tools/make_fixtures.py
"""

import json
import os

import numpy as np

FIXDIR = os.path.join(os.path.dirname(__file__), "..", "crates", "core", "tests", "fixtures")


# ---------------------------------------------------------------------------
# RLE codec
# ---------------------------------------------------------------------------

def rle_encode(mask):
    """Column-major run lengths of a (h, w) bool array, starting with zeros."""
    flat = np.asarray(mask, dtype=np.uint8).flatten(order="F")
    n = flat.size
    if n == 0:
        return []
    change = np.flatnonzero(flat[1:] != flat[:-1])
    pos = np.concatenate(([-1], change, [n - 1]))
    counts = np.diff(pos).tolist()
    if flat[0] == 1:
        counts = [0] + counts
    return [int(c) for c in counts]


def rle_decode(counts, h, w):
    total = sum(counts)
    assert total == h * w, (total, h, w)
    flat = np.zeros(total, dtype=np.uint8)
    pos = 0
    val = 0
    for c in counts:
        flat[pos:pos + c] = val
        pos += c
        val = 1 - val
    return flat.reshape((h, w), order="F").astype(bool)


def rle_to_string(counts):
    """LEB128-like base-32 packing with sign folding and, from the third
    count on, second-order deltas."""
    out = []
    cnts = [int(c) for c in counts]
    for i, x in enumerate(cnts):
        if i > 2:
            x -= cnts[i - 2]
        more = True
        while more:
            c = x & 0x1F
            x >>= 5  # arithmetic shift, as in the reference C
            more = (x != -1) if (c & 0x10) else (x != 0)
            if more:
                c |= 0x20
            out.append(chr(c + 48))
    return "".join(out)


def rle_from_string(s):
    cnts = []
    i = 0
    while i < len(s):
        x = 0
        k = 0
        more = True
        while more:
            c = ord(s[i]) - 48
            x |= (c & 0x1F) << (5 * k)
            more = bool(c & 0x20)
            i += 1
            k += 1
            if not more and (c & 0x10):
                x |= -1 << (5 * k)
        if len(cnts) > 2:
            x += cnts[-2]
        cnts.append(x)
    return cnts


def self_check_codec():
    # Published reference values for the codec and run-length layout.
    assert rle_encode(np.array([[1, 0], [0, 0]], dtype=bool)) == [0, 1, 3]
    assert rle_encode(np.zeros((3, 3), dtype=bool)) == [9]
    rng = np.random.default_rng(7)
    for _ in range(200):
        h = int(rng.integers(1, 40))
        w = int(rng.integers(1, 40))
        m = rng.random((h, w)) < rng.random()
        counts = rle_encode(m)
        s = rle_to_string(counts)
        assert rle_from_string(s) == counts, (h, w, counts, s)
        assert np.array_equal(rle_decode(counts, h, w), m)


# ---------------------------------------------------------------------------
# Mask AP evaluation (standard COCO protocol, single category)
# ---------------------------------------------------------------------------

AREA_SMALL = 32.0 ** 2
AREA_MEDIUM = 96.0 ** 2
AREA_MAX = 1e10


def mask_iou(det, gt, gt_crowd):
    inter = np.logical_and(det, gt).sum()
    da = det.sum()
    ga = gt.sum()
    denom = float(da) if gt_crowd else float(da + ga - inter)
    return 0.0 if denom == 0 else float(inter) / denom


def evaluate_img(gt_areas, gt_crowd, det_scores, det_areas, ious, rng, thrs):
    G = len(gt_areas)
    D = len(det_scores)
    gt_ig = np.array(
        [gt_crowd[g] or gt_areas[g] < rng[0] or gt_areas[g] > rng[1] for g in range(G)]
    )
    gt_order = sorted(range(G), key=lambda g: bool(gt_ig[g]))  # stable
    T = len(thrs)
    dt_m = np.zeros((T, D), dtype=bool)
    dt_ig = np.zeros((T, D), dtype=bool)
    for ti, t in enumerate(thrs):
        gtm = np.zeros(G, dtype=bool)
        for d in range(D):
            best = min(t, 1 - 1e-10)
            m = -1
            for g in gt_order:
                if gtm[g] and not gt_crowd[g]:
                    continue
                if m > -1 and not gt_ig[m] and gt_ig[g]:
                    break
                if ious[d, g] < best:
                    continue
                best = ious[d, g]
                m = g
            if m > -1:
                dt_ig[ti, d] = gt_ig[m]
                dt_m[ti, d] = True
                gtm[m] = True
        outside = (np.asarray(det_areas) < rng[0]) | (np.asarray(det_areas) > rng[1])
        dt_ig[ti] |= (~dt_m[ti]) & outside
    return {
        "scores": np.asarray(det_scores, dtype=float),
        "m": dt_m,
        "ig": dt_ig,
        "npig": int((~gt_ig).sum()),
    }


def accumulate(evals, thrs, rec_points):
    T = len(thrs)
    npig = sum(e["npig"] for e in evals)
    if npig == 0:
        return {"ap_t": [-1.0] * T, "ap": -1.0, "rc_t": [-1.0] * T}
    scores = np.concatenate([e["scores"] for e in evals]) if evals else np.array([])
    order = np.argsort(-scores, kind="mergesort")
    rec_thrs = np.linspace(0.0, 1.0, rec_points)
    ap_t = []
    rc_t = []
    for ti in range(T):
        matched = np.concatenate([e["m"][ti] for e in evals])[order]
        ignored = np.concatenate([e["ig"][ti] for e in evals])[order]
        keep = ~ignored
        tps = np.cumsum(matched[keep]).astype(float)
        fps = np.cumsum(~matched[keep]).astype(float)
        n = tps.size
        rc = tps / npig
        pr = tps / (tps + fps + np.spacing(1))
        for i in range(n - 1, 0, -1):
            if pr[i] > pr[i - 1]:
                pr[i - 1] = pr[i]
        q = np.zeros(rec_points)
        inds = np.searchsorted(rc, rec_thrs, side="left")
        for ri, pi in enumerate(inds):
            if pi < n:
                q[ri] = pr[pi]
        ap_t.append(float(q.mean()))
        rc_t.append(float(rc[-1]) if n > 0 else 0.0)
    return {"ap_t": ap_t, "ap": float(np.mean(ap_t)), "rc_t": rc_t}


def evaluate(gt_json, det_json, exclude_small=False):
    thrs = [0.5 + 0.05 * i for i in range(10)]
    images = {im["id"]: (im["height"], im["width"]) for im in gt_json["images"]}
    gts_by_img = {}
    for a in gt_json["annotations"]:
        gts_by_img.setdefault(a["image_id"], []).append(a)
    dets_by_img = {}
    for d in det_json:
        dets_by_img.setdefault(d["image_id"], []).append(d)

    per_image = []
    for img_id in sorted(images):
        h, w = images[img_id]
        gts = gts_by_img.get(img_id, [])
        dets = dets_by_img.get(img_id, [])
        if not gts and not dets:
            continue
        gmasks = [rle_decode(a["segmentation"]["counts"], h, w) for a in gts]
        scores = np.array([d["score"] for d in dets])
        order = np.argsort(-scores, kind="mergesort")[:100]
        dets = [dets[i] for i in order]
        dmasks = [
            rle_decode(rle_from_string(d["segmentation"]["counts"]), h, w) for d in dets
        ]
        crowd = [bool(a["iscrowd"]) for a in gts]
        ious = np.zeros((len(dets), len(gts)))
        for di, dm in enumerate(dmasks):
            for gi, gm in enumerate(gmasks):
                ious[di, gi] = mask_iou(dm, gm, crowd[gi])
        per_image.append({
            "gt_areas": [float(a["area"]) for a in gts],
            "gt_crowd": crowd,
            "det_scores": [float(d["score"]) for d in dets],
            "det_areas": [float(m.sum()) for m in dmasks],
            "ious": ious,
        })

    all_lo = AREA_SMALL if exclude_small else 0.0
    ranges = {
        "all": (all_lo, AREA_MAX),
        "small": (0.0, AREA_SMALL),
        "medium": (AREA_SMALL, AREA_MEDIUM),
        "large": (AREA_MEDIUM, AREA_MAX),
    }

    def run(rng):
        evs = [
            evaluate_img(
                p["gt_areas"], p["gt_crowd"], p["det_scores"], p["det_areas"],
                p["ious"], rng, thrs,
            )
            for p in per_image
        ]
        return accumulate(evs, thrs, 101)

    res_all = run(ranges["all"])
    res_med = run(ranges["medium"])
    res_lrg = run(ranges["large"])
    valid = [r for r in res_all["rc_t"] if r > -1.0]
    out = {
        "ap": res_all["ap"],
        "ap50": res_all["ap_t"][0],
        "ap75": res_all["ap_t"][5],
        "ap_per_threshold": res_all["ap_t"],
        "ap_medium": res_med["ap"],
        "ap_large": res_lrg["ap"],
        "ar": float(np.mean(valid)) if valid else -1.0,
    }
    if exclude_small:
        out["ap_small"] = None
    else:
        out["ap_small"] = run(ranges["small"])["ap"]
    return out


# ---------------------------------------------------------------------------
# Fixture generation
# ---------------------------------------------------------------------------

def make_rle_corpus(rng):
    cases = []

    def add(mask):
        h, w = mask.shape
        counts = rle_encode(mask)
        cases.append({
            "h": int(h),
            "w": int(w),
            "counts": counts,
            "compressed": rle_to_string(counts),
        })

    # Edge shapes.
    add(np.zeros((1, 1), dtype=bool))
    add(np.ones((1, 1), dtype=bool))
    add(np.zeros((5, 7), dtype=bool))
    add(np.ones((7, 5), dtype=bool))
    add(np.eye(9, dtype=bool))
    add(np.tri(6, 11, dtype=bool))
    add(np.arange(13).reshape(13, 1) % 2 == 0)
    add(np.arange(17).reshape(1, 17) % 3 == 0)
    # Long runs: exercise multi-character varints and negative deltas.
    big = np.zeros((200, 150), dtype=bool)
    big[30:170, 20:140] = True
    add(big)
    comb = np.zeros((64, 64), dtype=bool)
    comb[::2, :] = True
    add(comb)

    while len(cases) < 120:
        h = int(rng.integers(1, 100))
        w = int(rng.integers(1, 100))
        kind = int(rng.integers(0, 3))
        if kind == 0:
            m = rng.random((h, w)) < rng.uniform(0.05, 0.95)
        elif kind == 1:
            m = np.zeros((h, w), dtype=bool)
            for _ in range(int(rng.integers(1, 4))):
                r0 = int(rng.integers(0, h))
                c0 = int(rng.integers(0, w))
                r1 = int(rng.integers(r0, h)) + 1
                c1 = int(rng.integers(c0, w)) + 1
                m[r0:r1, c0:c1] = True
        else:
            yy, xx = np.mgrid[0:h, 0:w]
            cy = rng.uniform(0, h)
            cx = rng.uniform(0, w)
            ry = rng.uniform(1, max(2, h / 2))
            rx = rng.uniform(1, max(2, w / 2))
            m = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
        add(m)

    with open(os.path.join(FIXDIR, "rle_corpus.json"), "w") as f:
        json.dump(cases, f)
    print(f"rle_corpus.json: {len(cases)} masks")


def ellipse(h, w, cy, cx, ry, rx):
    yy, xx = np.mgrid[0:h, 0:w]
    return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0


def rect(h, w, r0, c0, r1, c1):
    m = np.zeros((h, w), dtype=bool)
    m[r0:r1, c0:c1] = True
    return m


def gt_entry(ann_id, img_id, mask, iscrowd=0):
    h, w = mask.shape
    ys, xs = np.nonzero(mask)
    bbox = [float(xs.min()), float(ys.min()),
            float(xs.max() - xs.min() + 1), float(ys.max() - ys.min() + 1)]
    return {
        "id": ann_id,
        "image_id": img_id,
        "category_id": 1,
        "segmentation": {"size": [h, w], "counts": rle_encode(mask)},
        "bbox": bbox,
        "area": float(mask.sum()),
        "iscrowd": iscrowd,
    }


def det_entry(img_id, mask, score):
    h, w = mask.shape
    return {
        "image_id": img_id,
        "category_id": 1,
        "segmentation": {"size": [h, w], "counts": rle_to_string(rle_encode(mask))},
        "score": round(float(score), 6),
    }


def degrade(mask, rng, p_drop, shift):
    """A plausibly imperfect detection: shift then randomly drop pixels."""
    m = np.roll(mask, shift, axis=(0, 1))
    if shift[0] > 0:
        m[:shift[0], :] = False
    if shift[1] > 0:
        m[:, :shift[1]] = False
    if shift[0] < 0:
        m[shift[0]:, :] = False
    if shift[1] < 0:
        m[:, shift[1]:] = False
    drop = rng.random(m.shape) < p_drop
    return m & ~drop


def make_eval_corpus(rng):
    images = [
        {"id": 1, "height": 100, "width": 120},
        {"id": 2, "height": 80, "width": 80},
        {"id": 3, "height": 96, "width": 128},
        {"id": 4, "height": 64, "width": 64},
    ]
    anns = []
    dets = []
    ann_id = 0
    score_pool = iter(np.round(rng.permutation(np.linspace(0.05, 0.99, 200)), 6))

    def add_gt(img_id, mask, iscrowd=0):
        nonlocal ann_id
        ann_id += 1
        anns.append(gt_entry(ann_id, img_id, mask, iscrowd))
        return mask

    for img in images:
        h, w = img["height"], img["width"]
        img_id = img["id"]
        gt_masks = []
        # A mix of sizes: small (<32^2), medium, and large (>96^2) objects.
        gt_masks.append(add_gt(img_id, rect(h, w, 2, 2, 12, 12)))               # 100 px
        gt_masks.append(add_gt(img_id, ellipse(h, w, h * 0.3, w * 0.3,
                                               h * 0.2, w * 0.2)))
        gt_masks.append(add_gt(img_id, rect(h, w, h // 2, w // 2,
                                            h - 2, w - 2)))
        if img_id in (1, 3):
            # One large object and one crowd region per big image.
            gt_masks.append(add_gt(img_id, rect(h, w, 4, 4, h - 4, w - 4)))
            add_gt(img_id, rect(h, w, 0, 0, h // 3, w), iscrowd=1)

        for j, gm in enumerate(gt_masks):
            # Exact, degraded, and badly-degraded detections; some objects get
            # no exact match so recall stays below 1 at high thresholds.
            if j % 2 == 0:
                dets.append(det_entry(img_id, gm, next(score_pool)))
            d1 = degrade(gm, rng, 0.12, (1, 1))
            if d1.any():
                dets.append(det_entry(img_id, d1, next(score_pool)))
            if j % 3 != 1:
                d2 = degrade(gm, rng, 0.45, (3, -2))
                if d2.any():
                    dets.append(det_entry(img_id, d2, next(score_pool)))
        # False positives.
        for _ in range(3):
            r0 = int(rng.integers(0, h - 8))
            c0 = int(rng.integers(0, w - 8))
            size = int(rng.integers(4, 20))
            fp = rect(h, w, r0, c0, min(h, r0 + size), min(w, c0 + size))
            dets.append(det_entry(img_id, fp, next(score_pool)))
        # Detections inside the crowd region (should be ignored, not FP).
        if img_id in (1, 3):
            crowd_piece = rect(h, w, 2, w // 3, h // 3 - 2, w // 3 + 15)
            dets.append(det_entry(img_id, crowd_piece, next(score_pool)))

    gt_json = {"images": images, "annotations": anns,
               "categories": [{"id": 1, "name": "person"}]}
    expected = {
        "default": evaluate(gt_json, dets, exclude_small=False),
        "exclude_small": evaluate(gt_json, dets, exclude_small=True),
    }
    with open(os.path.join(FIXDIR, "eval_gt.json"), "w") as f:
        json.dump(gt_json, f)
    with open(os.path.join(FIXDIR, "eval_dets.json"), "w") as f:
        json.dump(dets, f)
    with open(os.path.join(FIXDIR, "eval_expected.json"), "w") as f:
        json.dump(expected, f, indent=1)
    print(f"eval corpus: {len(anns)} gt, {len(dets)} dets, "
          f"ap={expected['default']['ap']:.6f} ar={expected['default']['ar']:.6f}")


def make_ap02_corpus():
    # One detection covering 11 of 20 GT pixels: IoU = 0.55, so it matches at
    # thresholds 0.50 and 0.55 only and AP = 2/10 = 0.2.
    h, w = 16, 16
    gt_mask = rect(h, w, 0, 0, 4, 5)   # 20 px
    det_mask = rect(h, w, 0, 0, 4, 5)
    flat = np.flatnonzero(det_mask.flatten(order="F"))
    det_mask_flat = det_mask.flatten(order="F")
    det_mask_flat[flat[11:]] = False
    det_mask = det_mask_flat.reshape((h, w), order="F")
    gt_json = {
        "images": [{"id": 1, "height": h, "width": w}],
        "annotations": [gt_entry(1, 1, gt_mask)],
        "categories": [{"id": 1, "name": "person"}],
    }
    dets = [det_entry(1, det_mask, 0.9)]
    expected = evaluate(gt_json, dets)
    assert abs(expected["ap"] - 0.2) < 1e-12, expected["ap"]
    with open(os.path.join(FIXDIR, "ap02_gt.json"), "w") as f:
        json.dump(gt_json, f)
    with open(os.path.join(FIXDIR, "ap02_dets.json"), "w") as f:
        json.dump(dets, f)
    with open(os.path.join(FIXDIR, "ap02_expected.json"), "w") as f:
        json.dump(expected, f, indent=1)
    print(f"ap02 corpus: ap={expected['ap']}")


def crop_box(x, y, bw, bh, factor, h, w):
    """Scale a box by `factor` about its center, clamp to the image, then
    round half-up to pixel bounds."""
    grow = (factor - 1.0) / 2.0
    x0 = max(x - grow * bw, 0.0)
    y0 = max(y - grow * bh, 0.0)
    x1 = min(x + bw + grow * bw, float(w))
    y1 = min(y + bh + grow * bh, float(h))
    c0 = int(np.floor(x0 + 0.5))
    r0 = int(np.floor(y0 + 0.5))
    c1 = int(np.floor(x1 + 0.5))
    r1 = int(np.floor(y1 + 0.5))
    return r0, c0, r1, c1


def make_crop_fixtures(rng):
    cases = []
    for i in range(12):
        h = int(rng.integers(16, 80))
        w = int(rng.integers(16, 80))
        m = np.zeros((h, w), dtype=bool)
        r0 = int(rng.integers(0, h - 4))
        c0 = int(rng.integers(0, w - 4))
        m |= ellipse(h, w, r0 + 3, c0 + 3, rng.uniform(2, 8), rng.uniform(2, 8))
        ys, xs = np.nonzero(m)
        bbox = [float(xs.min()), float(ys.min()),
                float(xs.max() - xs.min() + 1), float(ys.max() - ys.min() + 1)]
        factor = [1.5, 1.5, 1.5, 1.0, 2.0][i % 5]
        rr0, cc0, rr1, cc1 = crop_box(*bbox, factor, h, w)
        out = m[rr0:rr1, cc0:cc1]
        cases.append({
            "h": h,
            "w": w,
            "counts": rle_encode(m),
            "bbox": bbox,
            "factor": factor,
            "out_h": int(rr1 - rr0),
            "out_w": int(cc1 - cc0),
            "out_counts": rle_encode(out),
        })
    with open(os.path.join(FIXDIR, "crop_fixtures.json"), "w") as f:
        json.dump(cases, f)
    print(f"crop_fixtures.json: {len(cases)} cases")


def main():
    self_check_codec()
    os.makedirs(FIXDIR, exist_ok=True)
    make_rle_corpus(np.random.default_rng(20260823))
    make_eval_corpus(np.random.default_rng(424242))
    make_ap02_corpus()
    make_crop_fixtures(np.random.default_rng(99))


if __name__ == "__main__":
    main()
