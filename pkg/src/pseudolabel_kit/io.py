"""JSON/CSV interchange.

Annotations use a COCO subset::

    {"images": [{"id", "width", "height", "file_name"}],
     "annotations": [{"image_id", "category_id", "bbox": [x, y, w, h]}],
     "categories": [{"id", "name"}],
     "weak_labels": [{"image_id", "category_ids": [...]}]}   # extension

Images listed under ``weak_labels`` are weakly annotated; every other image is
fully annotated (possibly with no instances). Detections are a JSON array of
``{"image_id", "bbox", "scores", "objectness"?}``. Pseudo labels are written
COCO-shaped with extra ``score``/``strategy_tag`` fields plus a ``sets`` block
so that empty sets survive a round trip.

When a box's corners cannot be recovered exactly from float ``x + w``, writers
add a ``box_xyxy`` corner field that readers prefer over ``bbox``.

Output files are byte-reproducible: sorted keys, fixed indentation and the
shortest round-trip float repr.
"""
from __future__ import annotations

import csv
import io
import json
import math
from pathlib import Path
from typing import Optional, Sequence

from .errors import FormatError, ValidationError
from .geometry import Box
from .model import Dataset, Detection, ImageRecord, Instance, WeakLabels, validate_record
from .pseudolabel import PseudoLabel, PseudoLabelSet


def dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=1, ensure_ascii=False, allow_nan=False) + "\n"


def write_json(path, obj) -> None:
    Path(path).write_text(dumps(obj), encoding="utf-8")


def read_json(path):
    text = Path(path).read_text(encoding="utf-8")
    try:
        return json.loads(text)
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: invalid JSON at line {e.lineno}, column {e.colno} (offset {e.pos}): {e.msg}") from e


def _image_id_out(image_id: str):
    # numeric ids go back out as JSON numbers, anything else stays a string
    if image_id.isdigit() and str(int(image_id)) == image_id:
        return int(image_id)
    return image_id


def _image_id_in(raw, where: str) -> str:
    if isinstance(raw, bool) or not isinstance(raw, (int, str)):
        raise FormatError(f"{where}: image id must be an integer or string, got {raw!r}")
    return str(raw)


def _extent(lo: float, hi: float):
    """A width w with lo + w == hi in float arithmetic, or None if there is none nearby."""
    w0 = hi - lo
    if lo + w0 == hi:
        return w0
    for direction in (math.inf, -math.inf):
        w = w0
        for _ in range(4):
            w = math.nextafter(w, direction)
            if lo + w == hi:
                return w
    return None


def xywh(box: Box) -> list[float]:
    """COCO [x, y, w, h]; x + w and y + h reproduce x2, y2 whenever some float width allows it."""
    w, h = _extent(box.x1, box.x2), _extent(box.y1, box.y2)
    return [box.x1, box.y1, box.x2 - box.x1 if w is None else w, box.y2 - box.y1 if h is None else h]


def box_fields(box: Box) -> dict:
    """``bbox`` plus, only when xywh cannot be exact, the corners as ``box_xyxy``."""
    bbox = xywh(box)
    out = {"bbox": bbox}
    if bbox[0] + bbox[2] != box.x2 or bbox[1] + bbox[3] != box.y2:
        out["box_xyxy"] = list(box.as_tuple())
    return out


def box_from_entry(entry: dict, where: str) -> Box:
    box = box_from_xywh(_field(entry, "bbox", where), where)
    corners = entry.get("box_xyxy")
    if corners is None:
        return box
    if not isinstance(corners, list) or len(corners) != 4:
        raise FormatError(f"{where}: box_xyxy must be four numbers, got {corners!r}")
    try:
        exact = Box(*(float(v) for v in corners))
    except (TypeError, ValueError) as e:
        raise ValidationError(f"{where}: {e}", [str(e)]) from e
    if not all(math.isclose(a, b, rel_tol=1e-9, abs_tol=1e-9) for a, b in zip(exact.as_tuple(), box.as_tuple())):
        raise ValidationError(f"{where}: box_xyxy disagrees with bbox", [f"{where}: box_xyxy disagrees with bbox"])
    return exact


def box_from_xywh(bbox, where: str) -> Box:
    if not isinstance(bbox, list) or len(bbox) != 4 or not all(
        isinstance(v, (int, float)) and not isinstance(v, bool) for v in bbox
    ):
        raise FormatError(f"{where}: bbox must be four numbers, got {bbox!r}")
    x, y, w, h = (float(v) for v in bbox)
    if w < 0 or h < 0:
        raise ValidationError(f"{where}: negative bbox size {bbox}", [f"{where}: negative bbox size"])
    try:
        return Box(x, y, x + w, y + h)
    except ValueError as e:
        raise ValidationError(f"{where}: {e}", [str(e)]) from e


def _field(obj, key, where):
    if not isinstance(obj, dict) or key not in obj:
        raise FormatError(f"{where}: missing field {key!r}")
    return obj[key]


def _list_field(doc, key, where, required=True):
    if key not in doc:
        if required:
            raise FormatError(f"{where}: missing top-level {key!r}")
        return []
    value = doc[key]
    if not isinstance(value, list):
        raise FormatError(f"{where}: {key!r} must be an array")
    return value


def _categories(doc, where) -> tuple[list[str], list[int]]:
    names, ids = [], []
    entries = _list_field(doc, "categories", where)
    for i, c in enumerate(entries):
        cid = _field(c, "id", f"{where}: categories[{i}]")
        if not isinstance(cid, int) or isinstance(cid, bool):
            raise FormatError(f"{where}: categories[{i}] id must be an integer")
        ids.append(cid)
        names.append(str(_field(c, "name", f"{where}: categories[{i}]")))
    if len(set(ids)) != len(ids):
        raise ValidationError(f"{where}: duplicate category ids", ["duplicate category ids"])
    return names, ids


def load_annotations(path) -> Dataset:
    where = str(path)
    doc = read_json(path)
    if not isinstance(doc, dict):
        raise FormatError(f"{where}: top level must be an object")
    names, ids = _categories(doc, where)
    index_of = {cid: k for k, cid in enumerate(ids)}
    c_count = len(names)

    images = []
    sizes = {}
    for i, im in enumerate(_list_field(doc, "images", where)):
        loc = f"{where}: images[{i}]"
        image_id = _image_id_in(_field(im, "id", loc), loc)
        w, h = _field(im, "width", loc), _field(im, "height", loc)
        if image_id in sizes:
            raise ValidationError(f"{loc}: duplicate image id {image_id}", [f"duplicate image id {image_id}"])
        sizes[image_id] = (w, h)
        images.append(image_id)

    problems = []
    instances: dict[str, list[Instance]] = {im: [] for im in images}
    for i, ann in enumerate(_list_field(doc, "annotations", where)):
        loc = f"{where}: annotations[{i}]"
        image_id = _image_id_in(_field(ann, "image_id", loc), loc)
        cat = _field(ann, "category_id", loc)
        if image_id not in instances:
            problems.append(f"{loc}: unknown image {image_id}")
            continue
        if cat not in index_of:
            problems.append(f"{loc}: unknown category {cat}")
            continue
        instances[image_id].append(Instance(index_of[cat], box_from_entry(ann, loc)))

    weak: dict[str, WeakLabels] = {}
    for i, entry in enumerate(_list_field(doc, "weak_labels", where, required=False)):
        loc = f"{where}: weak_labels[{i}]"
        image_id = _image_id_in(_field(entry, "image_id", loc), loc)
        cats = _field(entry, "category_ids", loc)
        if image_id not in sizes:
            problems.append(f"{loc}: image {image_id} not listed under images")
            continue
        if instances[image_id]:
            problems.append(f"{loc}: image {image_id} has both box annotations and weak labels")
            continue
        if not isinstance(cats, list) or any(c not in index_of for c in cats):
            problems.append(f"{loc}: unknown category ids {cats!r}")
            continue
        weak[image_id] = WeakLabels.from_classes([index_of[c] for c in cats], c_count)

    records = []
    for image_id in images:
        w, h = sizes[image_id]
        if image_id in weak:
            records.append(ImageRecord(image_id, w, h, weak[image_id]))
        else:
            insts = tuple(instances[image_id])
            labels = WeakLabels.from_classes({a.class_id for a in insts}, c_count)
            records.append(ImageRecord(image_id, w, h, labels, insts))
    for r in records:
        problems.extend(validate_record(r, c_count))
    if problems:
        raise ValidationError(f"{where}: {len(problems)} invalid record(s); first: {problems[0]}", problems)
    return Dataset(tuple(names), tuple(records), tuple(ids))


def dataset_to_json(ds: Dataset) -> dict:
    images, annotations, weak = [], [], []
    for r in ds.records:
        images.append({"id": _image_id_out(r.image_id), "width": r.width, "height": r.height,
                       "file_name": f"{r.image_id}.jpg"})
        if r.full_annotations is None:
            weak.append({"image_id": _image_id_out(r.image_id),
                         "category_ids": [ds.category_ids[k] for k in r.weak_labels.positive_classes()]})
            continue
        for inst in r.foreground():
            annotations.append({"id": len(annotations) + 1, "image_id": _image_id_out(r.image_id),
                                "category_id": ds.category_ids[inst.class_id], **box_fields(inst.box)})
    doc = {
        "images": images,
        "annotations": annotations,
        "categories": [{"id": cid, "name": n} for cid, n in zip(ds.category_ids, ds.categories)],
    }
    if weak:
        doc["weak_labels"] = weak
    return doc


def write_dataset(path, ds: Dataset) -> None:
    """Background instances are not written; the format has no place for them."""
    write_json(path, dataset_to_json(ds))


def load_detections(path, num_classes: Optional[int] = None) -> dict[str, list[Detection]]:
    where = str(path)
    doc = read_json(path)
    if not isinstance(doc, list):
        raise FormatError(f"{where}: detections must be a JSON array")
    out: dict[str, list[Detection]] = {}
    problems = []
    for i, entry in enumerate(doc):
        loc = f"{where}: [{i}]"
        image_id = _image_id_in(_field(entry, "image_id", loc), loc)
        scores = _field(entry, "scores", loc)
        if not isinstance(scores, list):
            raise FormatError(f"{loc}: scores must be an array")
        if num_classes is not None and len(scores) != num_classes:
            problems.append(f"{loc}: {len(scores)} scores, expected {num_classes}")
            continue
        try:
            det = Detection(box_from_entry(entry, loc), tuple(scores),
                            entry.get("objectness"))
        except (ValueError, TypeError) as e:
            problems.append(f"{loc}: {e}")
            continue
        out.setdefault(image_id, []).append(det)
    if problems:
        raise ValidationError(f"{where}: {len(problems)} invalid detection(s); first: {problems[0]}", problems)
    return out


def detections_to_json(dets: dict[str, Sequence[Detection]]) -> list[dict]:
    out = []
    for image_id, items in dets.items():
        for d in items:
            entry = {"image_id": _image_id_out(image_id), **box_fields(d.box), "scores": list(d.class_scores)}
            if d.objectness is not None:
                entry["objectness"] = d.objectness
            out.append(entry)
    return out


def write_detections(path, dets: dict[str, Sequence[Detection]]) -> None:
    write_json(path, detections_to_json(dets))


def pseudo_labels_to_json(sets: Sequence[PseudoLabelSet], categories: Optional[Dataset] = None) -> dict:
    ids = categories.category_ids if categories is not None else None
    annotations, blocks = [], []
    for idx, s in enumerate(sets):
        blocks.append({"set_index": idx, "image_id": _image_id_out(s.image_id), "strategy_tag": s.strategy_tag})
        for label in s.labels:
            annotations.append({
                "id": len(annotations) + 1,
                "set_index": idx,
                "image_id": _image_id_out(s.image_id),
                "category_id": ids[label.class_id] if ids is not None else label.class_id,
                **box_fields(label.box),
                "score": label.score,
                "strategy_tag": s.strategy_tag,
            })
    cats = []
    if categories is not None:
        cats = [{"id": cid, "name": n} for cid, n in zip(categories.category_ids, categories.categories)]
    return {"annotations": annotations, "categories": cats, "sets": blocks}


def write_pseudo_labels(path, sets: Sequence[PseudoLabelSet], categories: Optional[Dataset] = None) -> None:
    """Category ids come from ``categories`` when given, else class indices are written as-is."""
    write_json(path, pseudo_labels_to_json(sets, categories))


def load_pseudo_labels(path) -> list[PseudoLabelSet]:
    where = str(path)
    doc = read_json(path)
    if not isinstance(doc, dict):
        raise FormatError(f"{where}: top level must be an object")
    _, ids = _categories(doc, where) if doc.get("categories") else ([], [])
    index_of = {cid: k for k, cid in enumerate(ids)}
    blocks = _list_field(doc, "sets", where, required=False)
    sets: list[tuple[str, str, list[PseudoLabel]]] = []
    for i, b in enumerate(blocks):
        loc = f"{where}: sets[{i}]"
        if _field(b, "set_index", loc) != i:
            raise FormatError(f"{loc}: set_index must equal position {i}")
        sets.append((_image_id_in(_field(b, "image_id", loc), loc), str(b.get("strategy_tag", "")), []))
    for i, ann in enumerate(_list_field(doc, "annotations", where)):
        loc = f"{where}: annotations[{i}]"
        image_id = _image_id_in(_field(ann, "image_id", loc), loc)
        cat = _field(ann, "category_id", loc)
        class_id = index_of[cat] if index_of else cat
        if index_of and cat not in index_of:
            raise ValidationError(f"{loc}: unknown category {cat}", [f"{loc}: unknown category {cat}"])
        if "set_index" in ann:
            idx = ann["set_index"]
        else:
            # plain COCO detections file: one set per (image, tag)
            tag = str(ann.get("strategy_tag", ""))
            idx = next((j for j, s in enumerate(sets) if s[0] == image_id and s[1] == tag), None)
            if idx is None:
                sets.append((image_id, tag, []))
                idx = len(sets) - 1
        if not isinstance(idx, int) or not 0 <= idx < len(sets) or sets[idx][0] != image_id:
            raise FormatError(f"{loc}: set_index {idx!r} does not match a set for image {image_id}")
        try:
            label = PseudoLabel(class_id, box_from_entry(ann, loc), float(_field(ann, "score", loc)))
        except (TypeError, ValueError) as e:
            if isinstance(e, ValidationError):
                raise
            raise ValidationError(f"{loc}: {e}", [f"{loc}: {e}"]) from e
        sets[idx][2].append(label)
    return [PseudoLabelSet(image_id, tuple(labels), tag) for image_id, tag, labels in sets]


def table_to_csv(rows: Sequence[dict], columns: Optional[Sequence[str]] = None) -> str:
    if columns is None:
        columns = list(rows[0]) if rows else []
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(columns), lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: _csv_cell(row.get(k)) for k in columns})
    return buf.getvalue()


def _csv_cell(v):
    if isinstance(v, float):
        return repr(v)
    return "" if v is None else v


def write_table(path, rows: Sequence[dict], columns: Optional[Sequence[str]] = None, meta: Optional[dict] = None) -> None:
    """CSV when the suffix is .csv, JSON otherwise."""
    path = Path(path)
    if path.suffix.lower() == ".csv":
        path.write_text(table_to_csv(rows, columns), encoding="utf-8")
    else:
        write_json(path, {**(meta or {}), "rows": list(rows)})
