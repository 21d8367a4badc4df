"""Phantom simulation MCP tools."""

import json

from dmri_metsc.config import Config
from dmri_metsc.data_io import make_phantom, write_phantom
from dmri_metsc.errors import MetscError
from dmri_metsc.models import ModelKind


async def handle_simulate_phantom(arguments: dict) -> str:
    """Handle simulate_phantom tool call."""
    kind = arguments.get("kind")
    dims = arguments.get("dims") or [32, 32, 4]
    snr = arguments.get("snr", 30.0)
    seed = arguments.get("seed")
    out = arguments.get("out")

    if not kind:
        raise ValueError("kind is required")

    try:
        seed = Config.get_default_seed() if seed is None else int(seed)
        out_dir = Config.get_output_dir(out)
        phantom = make_phantom(ModelKind(kind), tuple(dims), snr=snr, seed=seed)
        paths = write_phantom(out_dir, phantom)

        response = {
            "success": True,
            "data": {
                "kind": phantom.volume.provenance["kind"],
                "dims": list(phantom.volume.dims),
                "snr": snr,
                "seed": seed,
                "data_hash": phantom.volume.data_hash(),
                "files": {name: str(path) for name, path in paths.items()},
            },
        }

        return json.dumps(response, indent=2)

    except (MetscError, ValueError, TypeError, OSError) as e:
        response = {
            "success": False,
            "error": type(e).__name__,
            "message": str(e),
        }
        return json.dumps(response, indent=2)
