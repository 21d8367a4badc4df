"""Entry point for the dmri-metsc MCP server."""

import logging

from dmri_metsc.config import Config


def main():
    """Main entry point."""
    from dmri_metsc.server import main as server_main

    logging.basicConfig(
        level=Config.get_log_level(), format="%(asctime)s - %(name)s - %(levelname)s - %(message)s"
    )

    server_main()


if __name__ == "__main__":
    main()
