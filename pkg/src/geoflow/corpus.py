"""Synthetic desk-scale benchmark corpus.

Each case is a three-stage ASCII-grid pipeline (prepare bands, extract a
feature raster, summarize it as key-value results) with ground truth for every
stage and scripted-backend fixtures for stage-wise and end-to-end runs. The
fixture tool scripts are ordinary numpy code; the ground truth is computed
here, separately, so a scoring pass genuinely compares two implementations.

Faults can be injected per stage to exercise the harness:

* ``"debug:N"``: N crashing scripts precede the correct one.
* ``"wrong"``: the script runs and validates but computes the wrong numbers.
* ``"abort"``: the script always crashes (the node exhausts its rounds).
"""

from __future__ import annotations

import json
import shutil
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from geoflow.core import StageLabel
from geoflow.validation import write_ascii_grid

NODATA = -9999.0
ROWS, COLS = 24, 32
CELLSIZE = 30.0
DP, FE, GA = (s.value for s in StageLabel)


@dataclass
class BandSpec:
    stem: str
    offset: float
    gain: float
    noise: float
    integer: bool = False
    classes: int = 0  # >0: categorical product with classes 1..n


@dataclass
class CaseSpec:
    case_id: str
    domain: str
    modality: str
    text: str
    bands: list[BandSpec]
    prep: dict[str, Any]
    feature: dict[str, Any]
    analysis: dict[str, Any]
    seed: int
    crs: str = "EPSG:32650"
    tools: list[dict[str, Any]] = field(default_factory=list)


SEGMENTER = {
    "entry_id": "building_segmenter",
    "tier": "external_command",
    "description": "pre-trained building footprint segmentation model for single-band brightness imagery",
    "body": "{python} -m geoflow.models threshold --input {input} --output {output} --above 0.6",
    "provenance": "bench stand-in",
}
SOIL_MODEL = {
    "entry_id": "bare_soil_segmenter",
    "tier": "external_command",
    "description": "pre-trained bare soil segmentation model for single-band brightness imagery",
    "body": "{python} -m geoflow.models threshold --input {input} --output {output} --above 0.55",
    "provenance": "bench stand-in",
}


def default_specs() -> list[CaseSpec]:
    ms = "multispectral"
    return [
        CaseSpec(
            "veg_ndvi", "vegetation", ms,
            "Compute NDVI from the red and near-infrared bands and report the mean NDVI "
            "and the fraction of densely vegetated pixels (NDVI > 0.3).",
            [BandSpec("red", 2400, -1500, 60, True), BandSpec("nir", 1500, 3500, 80, True)],
            {"op": "scale", "factor": 0.0001},
            {"op": "normdiff", "a": "nir_p", "b": "red_p", "name": "ndvi", "kind": "ndvi"},
            {"op": "summary", "threshold": 0.3},
            seed=11,
        ),
        CaseSpec(
            "agri_vigor", "agriculture", ms,
            "Assess crop vigor: mask saturated pixels, compute NDVI and report the mean "
            "and the share of fields with NDVI above 0.5.",
            [BandSpec("red", 2000, -1200, 50, True), BandSpec("nir", 2000, 4000, 90, True)],
            {"op": "mask", "lo": 1, "hi": 9000},
            {"op": "normdiff", "a": "nir_p", "b": "red_p", "name": "ndvi", "kind": "ndvi"},
            {"op": "summary", "threshold": 0.5},
            seed=12,
        ),
        CaseSpec(
            "water_ndwi", "water", ms,
            "Map open water with NDWI from green and near-infrared reflectance and "
            "report the mean NDWI and the water fraction (NDWI > 0).",
            [BandSpec("green", 900, 1400, 40, True), BandSpec("nir", 2600, -2100, 60, True)],
            {"op": "scale", "factor": 0.0001},
            {"op": "normdiff", "a": "green_p", "b": "nir_p", "name": "ndwi", "kind": "ndwi"},
            {"op": "summary", "threshold": 0.0},
            seed=13,
        ),
        CaseSpec(
            "snow_ndsi", "snow", ms,
            "Estimate snow cover with NDSI from green and shortwave-infrared bands; "
            "report mean NDSI and the snow fraction (NDSI > 0.4).",
            [BandSpec("green", 1800, 5000, 70, True), BandSpec("swir", 2500, -1200, 60, True)],
            {"op": "scale", "factor": 0.0001},
            {"op": "normdiff", "a": "green_p", "b": "swir_p", "name": "ndsi", "kind": "ndsi"},
            {"op": "summary", "threshold": 0.4},
            seed=14,
        ),
        CaseSpec(
            "soil_burn", "soil", ms,
            "Assess post-fire soil exposure with the normalized burn ratio from NIR and SWIR2; "
            "report mean NBR and the fraction of severely burned soil (NBR < -0.1).",
            [BandSpec("nir", 3500, -2200, 70, True), BandSpec("swir2", 1500, 1600, 50, True)],
            {"op": "clip", "lo": 0, "hi": 10000},
            {"op": "normdiff", "a": "nir_p", "b": "swir2_p", "name": "nbr", "kind": "nbr"},
            {"op": "summary", "threshold": -0.1, "below": True},
            seed=15,
        ),
        CaseSpec(
            "flood_sar", "water", "sar",
            "Delineate flooded areas from Sentinel-1 VV backscatter (dB): clip outliers, "
            "classify water below -18 dB and report the flooded fraction and area.",
            [BandSpec("vv", -6, -18, 1.2)],
            {"op": "clip", "lo": -30, "hi": 5},
            {"op": "threshold", "band": "vv_p", "below": -18, "name": "water_mask", "kind": "classification"},
            {"op": "summary"},
            seed=16,
        ),
        CaseSpec(
            "urban_lights", "urban", "ntl",
            "Extract the lit urban extent from night-time light radiance (mask negative "
            "radiance, urban where radiance > 20) and report its fraction and area.",
            [BandSpec("radiance", -2, 60, 3)],
            {"op": "mask", "lo": 0, "hi": 1000},
            {"op": "threshold", "band": "radiance_p", "above": 20, "name": "urban_mask", "kind": "classification"},
            {"op": "summary"},
            seed=17,
        ),
        CaseSpec(
            "economy_lights", "economy", "ntl",
            "Proxy economic activity with night-time lights: clip radiance to [0, 200], "
            "flag active pixels above 10 and report the active fraction and area.",
            [BandSpec("radiance", 0, 40, 4)],
            {"op": "clip", "lo": 0, "hi": 200},
            {"op": "threshold", "band": "radiance_p", "above": 10, "name": "active_mask", "kind": "classification"},
            {"op": "summary"},
            seed=18,
        ),
        CaseSpec(
            "urban_buildings", "urban", "rgb",
            "Segment buildings from a brightness image with the provided segmentation model "
            "after rescaling 8-bit values to [0, 1]; report building fraction and area.",
            [BandSpec("brightness", 40, 200, 8, True)],
            {"op": "scale", "factor": 1 / 255},
            {"op": "model", "band": "brightness_p", "tool": "building_segmenter", "above": 0.6,
             "name": "building_mask", "kind": "classification"},
            {"op": "summary"},
            seed=19,
            tools=[SEGMENTER],
        ),
        CaseSpec(
            "agri_landcover", "agriculture", "product",
            "From a land-cover product (classes 1-5), mask invalid codes, extract cropland "
            "(class 2) and report the cropland fraction and area.",
            [BandSpec("landcover", 0, 0, 0, True, classes=5)],
            {"op": "mask", "lo": 1, "hi": 5},
            {"op": "threshold", "band": "landcover_p", "equals": 2, "name": "cropland_mask", "kind": "classification"},
            {"op": "summary"},
            seed=20,
        ),
        CaseSpec(
            "snow_sar", "snow", "sar",
            "Detect wet snow from VV backscatter: clip to [-35, 5] dB, classify wet snow below "
            "-20 dB and report its fraction and area.",
            [BandSpec("vv", -8, -20, 1.5)],
            {"op": "clip", "lo": -35, "hi": 5},
            {"op": "threshold", "band": "vv_p", "below": -20, "name": "wetsnow_mask", "kind": "classification"},
            {"op": "summary"},
            seed=21,
        ),
        CaseSpec(
            "soil_bare", "soil", "rgb",
            "Map bare soil from a brightness image with the provided segmentation model after "
            "rescaling to [0, 1]; report the bare-soil fraction and area.",
            [BandSpec("brightness", 60, 170, 6, True)],
            {"op": "scale", "factor": 1 / 255},
            {"op": "model", "band": "brightness_p", "tool": "bare_soil_segmenter", "above": 0.55,
             "name": "baresoil_mask", "kind": "classification"},
            {"op": "summary"},
            seed=22,
            tools=[SOIL_MODEL],
        ),
    ]


# ground truth (numpy, in-process)


def latent_field(rng: np.random.Generator, rows: int = ROWS, cols: int = COLS) -> np.ndarray:
    y, x = np.mgrid[0:rows, 0:cols]
    f = np.zeros((rows, cols))
    for _ in range(3):
        fx, fy = rng.uniform(0.05, 0.25, 2)
        px, py = rng.uniform(0, 2 * np.pi, 2)
        f += np.sin(fx * x + px) * np.cos(fy * y + py)
    f = (f - f.min()) / (f.max() - f.min())
    return f


def make_band(spec: BandSpec, field_: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    if spec.classes:
        values = 1 + np.floor(field_ * spec.classes)
        values = np.clip(values, 1, spec.classes)
        invalid = rng.random(field_.shape) < 0.03
        values[invalid] = 0  # out-of-legend code
    else:
        values = spec.offset + spec.gain * field_ + rng.normal(0, spec.noise, field_.shape)
        if spec.integer:
            values = np.round(values)
    holes = rng.random(field_.shape) < 0.03
    values[holes] = NODATA
    return values


def apply_prep(values: np.ndarray, prep: dict[str, Any]) -> np.ndarray:
    out = values.copy()
    valid = values != NODATA
    if prep["op"] == "scale":
        out[valid] = values[valid] * prep["factor"]
    elif prep["op"] == "clip":
        out[valid] = np.clip(values[valid], prep["lo"], prep["hi"])
    elif prep["op"] == "mask":
        bad = valid & ((values < prep["lo"]) | (values > prep["hi"]))
        out[bad] = NODATA
    else:
        raise ValueError(prep["op"])
    return out


def apply_feature(bands: dict[str, np.ndarray], feature: dict[str, Any]) -> np.ndarray:
    if feature["op"] == "normdiff":
        a, b = bands[feature["a"]], bands[feature["b"]]
        out = np.full(a.shape, NODATA)
        ok = (a != NODATA) & (b != NODATA) & ((a + b) != 0)
        out[ok] = (a[ok] - b[ok]) / (a[ok] + b[ok])
        return out
    src = bands[feature["band"]]
    ok = src != NODATA
    hit = np.ones(src.shape, dtype=bool)
    if "above" in feature:
        hit &= src > feature["above"]
    if "below" in feature:
        hit &= src < feature["below"]
    if "equals" in feature:
        hit &= src == feature["equals"]
    out = np.where(hit, 1.0, 0.0)
    out[~ok] = NODATA
    return out


def feature_results(values: np.ndarray, feature: dict[str, Any], analysis: dict[str, Any]) -> dict[str, float]:
    name = feature["name"]
    valid = values[values != NODATA]
    if feature["kind"] == "classification":
        count = int(np.sum(valid == 1))
        return {
            f"{name}_fraction": count / valid.size,
            f"{name}_area_km2": count * CELLSIZE * CELLSIZE / 1e6,
        }
    t = analysis["threshold"]
    flagged = valid < t if analysis.get("below") else valid > t
    return {f"mean_{name}": float(np.mean(valid)), f"{name}_flagged_fraction": float(np.mean(flagged))}


# fixture scripts (what a competent coding agent would write)

PRELUDE = '''\
import json
import os

import numpy as np


def read_grid(path):
    with open(path) as fh:
        lines = fh.read().splitlines()
    header = {}
    i = 0
    while i < len(lines) and lines[i].split() and lines[i].split()[0][0].isalpha():
        key, value = lines[i].split()
        header[key.lower()] = float(value)
        i += 1
    data = np.array([[float(v) for v in ln.split()] for ln in lines[i:] if ln.strip()])
    prj = os.path.splitext(path)[0] + ".prj"
    crs = open(prj).read().strip() if os.path.exists(prj) else "unknown"
    return header, data, crs


def write_grid(path, header, data, crs):
    nodata = header.get("nodata_value", -9999.0)
    with open(path, "w") as fh:
        fh.write("ncols %d\\nnrows %d\\n" % (data.shape[1], data.shape[0]))
        fh.write("xllcorner %.10g\\nyllcorner %.10g\\n" % (header.get("xllcorner", 0.0), header.get("yllcorner", 0.0)))
        fh.write("cellsize %.10g\\nNODATA_value %.10g\\n" % (header["cellsize"], nodata))
        for row in data:
            fh.write(" ".join("%.10g" % v for v in row) + "\\n")
    if crs != "unknown":
        with open(os.path.splitext(path)[0] + ".prj", "w") as fh:
            fh.write(crs + "\\n")


def raster_entry(name, path, data, nodata, crs):
    valid = data[data != nodata]
    stats = {
        "rows": int(data.shape[0]), "cols": int(data.shape[1]), "bands": 1, "crs": crs,
        "nodata_fraction": float(1 - valid.size / data.size),
        "min": float(valid.min()) if valid.size else None,
        "max": float(valid.max()) if valid.size else None,
        "mean": float(valid.mean()) if valid.size else None,
    }
    return {"name": name, "path": path, "kind": "raster", "stats": stats}


def save_manifest(artifacts, results=None):
    with open("manifest.json", "w") as fh:
        json.dump({"artifacts": artifacts, "results": results}, fh, indent=2)


with open("node.json") as fh:
    NODE = json.load(fh)
PARAMS = NODE["params"]
'''

PROBE_BODY = '''
MODALITY = __MODALITY__

items = []
for path in os.environ["GF_DATA_POINTERS"].splitlines():
    if not path.strip():
        continue
    header, data, crs = read_grid(path)
    nodata = header.get("nodata_value", -9999.0)
    valid = data[data != nodata]
    stem = os.path.splitext(os.path.basename(path))[0]
    items.append({
        "path": path,
        "modality": MODALITY.get(stem, "unknown"),
        "rows": int(data.shape[0]), "cols": int(data.shape[1]), "bands": 1, "crs": crs,
        "min": [float(valid.min()) if valid.size else None],
        "max": [float(valid.max()) if valid.size else None],
        "mean": [float(valid.mean()) if valid.size else None],
        "nodata_fraction": [float(1 - valid.size / data.size)],
        "temporal": None,
        "extra": {"cellsize": header["cellsize"]},
    })
with open("profile.json", "w") as fh:
    json.dump({"items": items}, fh, indent=2)
print("probed %d file(s)" % len(items))
'''

PREP_BODY = '''
artifacts = []
for inp, out in zip(NODE["inputs"], NODE["outputs"]):
    header, data, crs = read_grid(inp["path"])
    nodata = header.get("nodata_value", -9999.0)
    valid = data != nodata
    result = data.copy()
__OP__
__WRONG__
    write_grid(out["path"], header, result, crs)
    artifacts.append(raster_entry(out["name"], out["path"], result, nodata, crs))
save_manifest(artifacts)
'''

PREP_OPS = {
    "scale": '    result[valid] = data[valid] * PARAMS["factor"]',
    "clip": '    result[valid] = np.clip(data[valid], PARAMS["lo"], PARAMS["hi"])',
    "mask": '    result[valid & ((data < PARAMS["lo"]) | (data > PARAMS["hi"]))] = nodata',
}
PREP_WRONG = '    if out is NODE["outputs"][-1]:\n        result[result != nodata] *= 1.5'

NORMDIFF_BODY = '''
paths = {p["name"]: p["path"] for p in NODE["inputs"]}
header, a, crs = read_grid(paths[PARAMS["a"]])
_, b, _ = read_grid(paths[PARAMS["b"]])
nodata = header.get("nodata_value", -9999.0)
__SWAP__
out = np.full(a.shape, nodata)
ok = (a != nodata) & (b != nodata) & ((a + b) != 0)
out[ok] = (a[ok] - b[ok]) / (a[ok] + b[ok])
target = NODE["outputs"][0]
write_grid(target["path"], header, out, crs)
save_manifest([raster_entry(target["name"], target["path"], out, nodata, crs)])
'''

THRESHOLD_BODY = '''
header, src, crs = read_grid(NODE["inputs"][0]["path"])
nodata = header.get("nodata_value", -9999.0)
ok = src != nodata
hit = np.ones(src.shape, dtype=bool)
if "above" in PARAMS:
    hit &= src > PARAMS["above"]__SHIFT__
if "below" in PARAMS:
    hit &= src < PARAMS["below"]__SHIFT__
if "equals" in PARAMS:
    hit &= src == PARAMS["equals"]__SHIFT__
out = np.where(hit, 1.0, 0.0)
out[~ok] = nodata
target = NODE["outputs"][0]
write_grid(target["path"], header, out, crs)
save_manifest([raster_entry(target["name"], target["path"], out, nodata, crs)])
'''

MODEL_BODY = '''
import shlex
import subprocess
import sys

command = __COMMAND__
source = NODE["inputs"][0]["path"]
target = NODE["outputs"][0]
subprocess.run(
    shlex.split(command.format(python=sys.executable, input=source, output=target["path"])),
    check=True,
)
header, out, crs = read_grid(target["path"])
nodata = header.get("nodata_value", -9999.0)
save_manifest([raster_entry(target["name"], target["path"], out, nodata, crs)])
'''

SUMMARY_BODY = '''
header, values, crs = read_grid(NODE["inputs"][0]["path"])
nodata = header.get("nodata_value", -9999.0)
valid = values[values != nodata]
name = PARAMS["feature"]
if PARAMS["feature_kind"] == "classification":
    count = int(np.sum(valid == 1))
    results = {
        name + "_fraction": count / valid.size__SCALE__,
        name + "_area_km2": count * header["cellsize"] ** 2 / 1e6,
    }
else:
    t = PARAMS["threshold"]
    flagged = valid < t if PARAMS.get("below") else valid > t
    results = {"mean_" + name: float(np.mean(valid))__SCALE__, name + "_flagged_fraction": float(np.mean(flagged))}
target = NODE["outputs"][0]
with open(target["path"], "w") as fh:
    json.dump(results, fh, indent=2, sort_keys=True)
save_manifest([{"name": target["name"], "path": target["path"], "kind": "keyvalue", "stats": None}], results)
print(json.dumps(results, sort_keys=True))
'''

BROKEN_BODIES = [
    '\nband = NODE["inputs"][0]["file"]  # wrong key\n',
    '\nheader, data, crs = read_grid(NODE["inputs"][0]["path"] + ".tif")\n',
    '\nvalues = np.loadtxt(NODE["inputs"][0]["path"])\n',
]


def _fenced(body: str) -> str:
    return f"```python\n{body}```"


def broken_script(i: int) -> str:
    return _fenced(PRELUDE + BROKEN_BODIES[i % len(BROKEN_BODIES)])


def stage_script(spec: CaseSpec, stage: str, wrong: bool = False) -> str:
    if stage == DP:
        body = PREP_BODY.replace("__OP__", PREP_OPS[spec.prep["op"]])
        body = body.replace("__WRONG__", PREP_WRONG if wrong else "")
    elif stage == FE:
        op = spec.feature["op"]
        if op == "normdiff":
            body = NORMDIFF_BODY.replace("__SWAP__", "a, b = b, a" if wrong else "")
        elif op == "threshold":
            body = THRESHOLD_BODY.replace("__SHIFT__", " * 0.5" if wrong and "equals" not in spec.feature else "")
            if wrong and "equals" in spec.feature:
                body = body.replace('src == PARAMS["equals"]', 'src == PARAMS["equals"] + 1')
        else:
            tool = next(t for t in spec.tools if t["entry_id"] == spec.feature["tool"])
            command = tool["body"]
            if wrong:
                command = command.replace(f"--above {spec.feature['above']}", f"--above {spec.feature['above'] * 0.5}")
            body = MODEL_BODY.replace("__COMMAND__", repr(command))
    else:
        body = SUMMARY_BODY.replace("__SCALE__", " * 1.1" if wrong else "")
    return _fenced(PRELUDE + body)


def probe_script(modalities: dict[str, str]) -> str:
    body = PROBE_BODY.replace("__MODALITY__", json.dumps(modalities, sort_keys=True))
    # the probe does not run inside a workflow node: drop the node.json bootstrap
    prelude = PRELUDE.split("\nwith open(\"node.json\")")[0] + "\n"
    return _fenced(prelude + body)


# plan / workflow documents


def _ports(spec: CaseSpec) -> dict[str, tuple[list[dict], list[dict]]]:
    raw = [b.stem for b in spec.bands]
    prepared = [f"{s}_p" for s in raw]
    feat = spec.feature
    dp = (
        [{"name": s, "kind": spec.modality, "path": ""} for s in raw],
        [{"name": p, "kind": "raster", "path": f"{p}.asc"} for p in prepared],
    )
    fe_inputs = [feat["a"], feat["b"]] if feat["op"] == "normdiff" else [feat["band"]]
    fe = (
        [{"name": n, "kind": "raster", "path": ""} for n in fe_inputs],
        [{"name": feat["name"], "kind": feat["kind"], "path": f"{feat['name']}.asc"}],
    )
    ga = (
        [{"name": feat["name"], "kind": feat["kind"], "path": ""}],
        [{"name": "summary", "kind": "keyvalue", "path": "summary.json"}],
    )
    return {DP: dp, FE: fe, GA: ga}


NODE_IDS = {DP: "prep", FE: "feature", GA: "analysis"}


def _descriptions(spec: CaseSpec) -> dict[str, str]:
    feat = spec.feature
    prep = spec.prep
    if prep["op"] == "scale":
        dp = f"Scale the {spec.modality} bands by {prep['factor']:.6g} to physical units, keeping NODATA"
    elif prep["op"] == "clip":
        dp = f"Clip {spec.modality} band values to the range {prep['lo']} to {prep['hi']}, keeping NODATA"
    else:
        dp = f"Mask {spec.modality} values outside {prep['lo']} to {prep['hi']} as NODATA"
    if feat["op"] == "normdiff":
        fe = f"Compute the {feat['kind'].upper()} normalized difference of {feat['a']} and {feat['b']}"
    elif feat["op"] == "model":
        fe = f"Run the {feat['tool']} model on {feat['band']} to produce {feat['name']}"
    else:
        fe = f"Threshold {feat['band']} into the binary class map {feat['name']}"
    ga = f"Summarize {feat['name']} into key-value statistics for the report"
    return {DP: dp, FE: fe, GA: ga}


def plan_documents(spec: CaseSpec, stages: list[str]) -> list[str]:
    """Three candidates: two near-duplicates of the sound plan and one plan
    that relies on an unavailable cloud mask."""
    ports = _ports(spec)
    desc = _descriptions(spec)
    steps = []
    for i, stage in enumerate(stages, start=1):
        ins, outs = ports[stage]
        steps.append(
            {
                "id": f"s{i}",
                "description": desc[stage],
                "inputs": [p["name"] for p in ins],
                "outputs": [p["name"] for p in outs],
                "stage": stage,
            }
        )
    variant = [dict(s, description=s["description"] + " accordingly") for s in steps]
    first_inputs = steps[0]["inputs"]
    alternative = [
        {
            "id": "s1",
            "description": "Apply a cloud mask to the raw scene before any analysis",
            "inputs": first_inputs + ["cloud_mask"],
            "outputs": ["clear_scene"],
            "stage": stages[0],
        },
        {
            "id": "s2",
            "description": "Derive the requested statistics directly from the clear scene",
            "inputs": ["clear_scene"],
            "outputs": ["quick_summary"],
            "stage": stages[-1],
        },
    ]
    return [json.dumps({"steps": p}, indent=2) for p in (steps, variant, alternative)]


def workflow_document(spec: CaseSpec, stages: list[str]) -> str:
    ports = _ports(spec)
    desc = _descriptions(spec)
    nodes = []
    for stage in stages:
        ins, outs = ports[stage]
        if stage == DP:
            params = {k: v for k, v in spec.prep.items() if k != "op"} | {"op": spec.prep["op"]}
        elif stage == FE:
            params = dict(spec.feature)
            if spec.feature["kind"] == "classification":
                params["class_ids"] = [0, 1]
        else:
            params = {"feature": spec.feature["name"], "feature_kind": spec.feature["kind"], **spec.analysis}
        nodes.append(
            {
                "id": NODE_IDS[stage],
                "purpose": desc[stage],
                "stage": stage,
                "inputs": ins,
                "outputs": outs,
                "params": params,
            }
        )
    return json.dumps({"nodes": nodes}, indent=2)


def coder_queue(spec: CaseSpec, stages: list[str], faults: dict[str, str]) -> tuple[list[str], bool]:
    queue: list[str] = []
    strict = True
    for stage in stages:
        fault = faults.get(stage, "")
        if fault.startswith("debug:"):
            queue.extend(broken_script(i) for i in range(int(fault.split(":")[1])))
        if fault == "abort":
            queue.append(broken_script(0))
            strict = False  # the broken script repeats until the node gives up
            break
        queue.append(stage_script(spec, stage, wrong=fault == "wrong"))
    return queue, strict


def narrative(spec: CaseSpec, stems: list[str]) -> str:
    return (
        f"{len(stems)} single-band ESRI ASCII grid(s) ({', '.join(stems)}), {ROWS}x{COLS} cells at "
        f"{CELLSIZE:g} m, projection {spec.crs}, roughly 3% NODATA cells (-9999)."
    )


def fixture(spec: CaseSpec, stages: list[str], modalities: dict[str, str], stems: list[str], faults: dict[str, str]) -> dict:
    coder, strict = coder_queue(spec, stages, faults)
    return {
        "strict": strict,
        "queues": {
            "data_summary": [probe_script(modalities), narrative(spec, stems)],
            "planner": plan_documents(spec, stages),
            "workflow": [workflow_document(spec, stages)],
            "coder": coder,
        },
    }


# case writer


def _expected(value: float, rel: float = 0.01, abs_tol: float = 1e-4) -> dict[str, float]:
    return {"expected": float(value), "rel_tol": rel, "abs_tol": abs_tol}


def build_case(spec: CaseSpec, dest: Path | str, faults: dict[str, str] | None = None) -> Path:
    faults = dict(faults or {})
    root = Path(dest) / spec.case_id
    if root.exists():
        shutil.rmtree(root)
    (root / "data").mkdir(parents=True)
    rng = np.random.default_rng(spec.seed)
    field_ = latent_field(rng)
    raw = {b.stem: make_band(b, field_, rng) for b in spec.bands}
    prepared = {f"{k}_p": apply_prep(v, spec.prep) for k, v in raw.items()}
    feature = apply_feature(prepared, spec.feature)
    results = feature_results(feature, spec.feature, spec.analysis)

    def grid(path: Path, values: np.ndarray) -> None:
        path.parent.mkdir(parents=True, exist_ok=True)
        write_ascii_grid(path, values, NODATA, CELLSIZE, 500000.0, 4200000.0, spec.crs)

    for stem, values in raw.items():
        grid(root / "data" / f"{stem}.asc", values)
    for stem, values in prepared.items():
        grid(root / "truth" / DP / f"{stem}.asc", values)
    fname = spec.feature["name"]
    grid(root / "truth" / FE / f"{fname}.asc", feature)
    (root / "truth" / GA).mkdir(parents=True)
    (root / "truth" / GA / "results.json").write_text(json.dumps(results, indent=2, sort_keys=True), encoding="utf-8")

    def stats(values: np.ndarray) -> dict[str, float]:
        valid = values[values != NODATA]
        return {"mean": float(valid.mean()), "min": float(valid.min()), "max": float(valid.max())}

    first = next(iter(prepared))
    feat_range = [-1.0, 1.0] if spec.feature["kind"] != "classification" else [0.0, 1.0]
    stage_specs = {
        DP: {
            "location_expect": [f"{s}.asc" for s in prepared],
            "metadata_expect": {"artifact": first, "rows": ROWS, "cols": COLS, "crs": spec.crs},
            "numeric_expect": [{"name": f"{s}.mean", **_expected(stats(v)["mean"])} for s, v in prepared.items()],
        },
        FE: {
            "location_expect": [f"{fname}.asc"],
            "metadata_expect": {"artifact": fname, "rows": ROWS, "cols": COLS, "value_range": feat_range},
            "numeric_expect": [{"name": f"{fname}.mean", **_expected(stats(feature)["mean"])}],
        },
        GA: {
            "location_expect": ["summary.json"],
            "metadata_expect": {},
            "numeric_expect": [{"name": k, **_expected(v)} for k, v in sorted(results.items())],
        },
    }
    modalities = {s: spec.modality for s in raw} | {s: spec.modality for s in prepared} | {fname: "product"}
    stage_inputs = {
        DP: [f"data/{s}.asc" for s in raw],
        FE: [f"truth/{DP}/{s}.asc" for s in prepared],
        GA: [f"truth/{FE}/{fname}.asc"],
    }
    case = {
        "case_id": spec.case_id,
        "domain": spec.domain,
        "modality": spec.modality,
        "instruction": {"id": spec.case_id, "text": spec.text, "domain_hint": spec.domain, "stage_scope": "full_pipeline"},
        "inputs": stage_inputs[DP],
        "stage_inputs": stage_inputs,
        "stage_specs": stage_specs,
        "provided_tools": spec.tools,
    }
    (root / "case.json").write_text(json.dumps(case, indent=2, sort_keys=True), encoding="utf-8")

    fixtures = root / "fixtures"
    fixtures.mkdir()
    all_stages = [DP, FE, GA]
    doc = fixture(spec, all_stages, modalities, list(raw), faults)
    (fixtures / "full_pipeline.json").write_text(json.dumps(doc, indent=2), encoding="utf-8")
    for stage in all_stages:
        stems = [Path(p).stem for p in stage_inputs[stage]]
        doc = fixture(spec, [stage], modalities, stems, faults)
        (fixtures / f"{stage}.json").write_text(json.dumps(doc, indent=2), encoding="utf-8")
    return root


def build_corpus(
    dest: Path | str,
    specs: list[CaseSpec] | None = None,
    faults: dict[str, dict[str, str]] | None = None,
) -> list[Path]:
    dest = Path(dest)
    dest.mkdir(parents=True, exist_ok=True)
    faults = faults or {}
    return [build_case(s, dest, faults.get(s.case_id)) for s in (specs or default_specs())]


def spec_by_id(case_id: str) -> CaseSpec:
    for spec in default_specs():
        if spec.case_id == case_id:
            return spec
    raise KeyError(case_id)


def main(argv: list[str] | None = None) -> int:
    import argparse

    parser = argparse.ArgumentParser(prog="python -m geoflow.corpus", description="write the synthetic bench corpus")
    parser.add_argument("dest")
    args = parser.parse_args(argv)
    for path in build_corpus(args.dest):
        print(path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
