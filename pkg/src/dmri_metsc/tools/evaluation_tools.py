"""Evaluation and sparsity-audit MCP tools."""

import json

from dmri_metsc.config import Config
from dmri_metsc.data_io import extract_windows, read_volume
from dmri_metsc.errors import MetscError
from dmri_metsc.evaluation import audit_codes, evaluate_files, write_audit
from dmri_metsc.training import collect_codes, load_model


async def handle_evaluate_maps(arguments: dict) -> str:
    """Handle evaluate_maps tool call."""
    pred = arguments.get("pred")
    truth = arguments.get("truth")
    mask = arguments.get("mask")
    out = arguments.get("out")

    if not pred:
        raise ValueError("pred is required")

    if not truth:
        raise ValueError("truth is required")

    try:
        report = evaluate_files([pred], [truth], mask)
        if out:
            report.write(Config.get_output_dir(out))

        response = {"success": True, "data": report.to_dict()}

        return json.dumps(response, indent=2, default=str)

    except (MetscError, ValueError, OSError) as e:
        response = {
            "success": False,
            "error": type(e).__name__,
            "message": str(e),
        }
        return json.dumps(response, indent=2)


async def handle_audit_sparsity(arguments: dict) -> str:
    """Handle audit_sparsity tool call."""
    weights_path = arguments.get("weights")
    data = arguments.get("data")
    out = arguments.get("out")

    if not weights_path:
        raise ValueError("weights is required")

    if not data:
        raise ValueError("data is required")

    try:
        volume = read_volume(data)
        weights, dictionary = load_model(weights_path, volume.scheme)
        windows = extract_windows(
            volume, patch_size=weights.encoder.patch_size, window=weights.encoder.window
        )
        audit = audit_codes(collect_codes(weights, dictionary, windows.windows))
        if out:
            write_audit(Config.get_output_dir(out), audit, {"weights": str(weights_path), "data": str(data)})

        response = {"success": True, "data": audit.to_dict()}

        return json.dumps(response, indent=2)

    except (MetscError, ValueError, OSError) as e:
        response = {
            "success": False,
            "error": type(e).__name__,
            "message": str(e),
        }
        return json.dumps(response, indent=2)
