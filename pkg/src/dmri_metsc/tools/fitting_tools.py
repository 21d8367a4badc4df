"""Volume fitting MCP tools."""

import json
import time

from dmri_metsc.config import Config
from dmri_metsc.data_io import read_volume, write_maps
from dmri_metsc.errors import MetscError, UsageError
from dmri_metsc.models import ModelKind
from dmri_metsc.solvers import fit_volume, resolve_method
from dmri_metsc.sparse_dict import build_dictionary, load_dictionary
from dmri_metsc.training import load_model, predict


async def handle_fit_volume(arguments: dict) -> str:
    """Handle fit_volume tool call."""
    method = arguments.get("method")
    volume_path = arguments.get("volume")
    dictionary_path = arguments.get("dictionary")
    weights_path = arguments.get("weights")
    out = arguments.get("out")

    if not method:
        raise ValueError("method is required")

    if not volume_path:
        raise ValueError("volume is required")

    try:
        method = resolve_method(method)
        volume = read_volume(volume_path)
        kind = ModelKind(volume.provenance.get("kind", ModelKind.IVIM.value))
        started = time.perf_counter()

        if method == "metsc":
            if not weights_path:
                raise UsageError("method 'metsc' needs a trained checkpoint in 'weights'")
            weights, dictionary = load_model(weights_path, volume.scheme, dictionary_path)
            maps = predict(volume, weights, dictionary)
        else:
            dictionary = None
            if method in ("iht", "nnls"):
                dictionary = (
                    load_dictionary(dictionary_path, volume.scheme)
                    if dictionary_path
                    else build_dictionary(kind, volume.scheme)
                )
            maps = fit_volume(volume, method, kind, dictionary)

        path = write_maps(
            Config.get_output_dir(out) / "maps.bin",
            maps,
            {"method": method, "volume": str(volume_path), "volume_hash": volume.data_hash()},
        )

        response = {
            "success": True,
            "data": {
                "method": method,
                "kind": kind.value,
                "maps": str(path),
                "parameters": maps.names,
                "voxels": int(volume.mask.sum()),
                "runtime_s": time.perf_counter() - started,
            },
        }

        return json.dumps(response, indent=2)

    except (MetscError, ValueError, OSError) as e:
        response = {
            "success": False,
            "error": type(e).__name__,
            "message": str(e),
        }
        return json.dumps(response, indent=2)
