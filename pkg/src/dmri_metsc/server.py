"""MCP server exposing the toolkit's batch operations."""

import logging
from typing import List, Optional

from fastmcp import FastMCP

from dmri_metsc.tools import (
    evaluation_tools,
    fitting_tools,
    scheme_tools,
    simulation_tools,
)

logger = logging.getLogger(__name__)
mcp = FastMCP("dmri-metsc")


@mcp.tool()
async def simulate_phantom(
    kind: Optional[str] = None,
    dims: Optional[List[int]] = None,
    snr: Optional[float] = 30.0,
    seed: Optional[int] = None,
    out: Optional[str] = None,
) -> str:
    """Simulate a synthetic IVIM or NODDI phantom and write the volume with its truth maps.

    Args:
        kind: Model kind, "ivim" or "noddi"
        dims: Volume extents [H, W, S] (defaults to [32, 32, 4])
        snr: Rician SNR relative to S0; null for noiseless signals
        seed: Noise seed (defaults to METSC_SEED)
        out: Output directory (defaults to METSC_OUTPUT_DIR)
    """
    return await simulation_tools.handle_simulate_phantom(
        {"kind": kind, "dims": dims, "snr": snr, "seed": seed, "out": out}
    )


@mcp.tool()
async def fit_volume(
    method: Optional[str] = None,
    volume: Optional[str] = None,
    dictionary: Optional[str] = None,
    weights: Optional[str] = None,
    out: Optional[str] = None,
) -> str:
    """Fit parameter maps to a volume with a classic solver or a trained network.

    Args:
        method: One of nlls, bayes, iht, nnls, metsc
        volume: Path to a volume file (its JSON sidecar must sit next to it)
        dictionary: Dictionary file for iht/nnls (built from the volume's scheme if omitted)
        weights: Checkpoint file, required for metsc
        out: Output directory for maps.bin (defaults to METSC_OUTPUT_DIR)
    """
    return await fitting_tools.handle_fit_volume(
        {"method": method, "volume": volume, "dictionary": dictionary, "weights": weights, "out": out}
    )


@mcp.tool()
async def evaluate_maps(
    pred: Optional[str] = None,
    truth: Optional[str] = None,
    mask: Optional[str] = None,
    out: Optional[str] = None,
) -> str:
    """Compare predicted parameter maps with gold-standard maps (MSE, bias, relative error).

    Args:
        pred: Predicted maps file
        truth: Gold-standard maps file
        mask: Optional uint8 mask file with the maps' spatial dims
        out: Directory to write the JSON/text/CSV report to (no files when omitted)
    """
    return await evaluation_tools.handle_evaluate_maps(
        {"pred": pred, "truth": truth, "mask": mask, "out": out}
    )


@mcp.tool()
async def audit_sparsity(
    weights: Optional[str] = None,
    data: Optional[str] = None,
    out: Optional[str] = None,
) -> str:
    """Measure how sparse a trained network's codes are over a volume.

    Args:
        weights: Checkpoint file (dictionary.bin is read from the same directory)
        data: Volume file acquired with the checkpoint's scheme
        out: Directory to write the histogram report to (no files when omitted)
    """
    return await evaluation_tools.handle_audit_sparsity({"weights": weights, "data": data, "out": out})


@mcp.tool()
async def describe_scheme(
    bval_path: Optional[str] = None,
    bvec_path: Optional[str] = None,
) -> str:
    """Summarize a gradient table: shells, directions per shell, b=0 count and content hash.

    Args:
        bval_path: Path to the whitespace-separated b-value file
        bvec_path: Path to the 3-row gradient direction file
    """
    return await scheme_tools.handle_describe_scheme({"bval_path": bval_path, "bvec_path": bvec_path})


def main():
    """Run the MCP server."""
    logger.info("Starting dmri-metsc MCP server")
    mcp.run()
