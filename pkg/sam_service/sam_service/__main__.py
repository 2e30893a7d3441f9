"""Serve the refinement endpoint: ``sam-service [--stub | --weights PATH]``.

The weights path may also come from the SAM_SERVICE_WEIGHTS environment
variable. Without weights and without --stub the service starts but answers
/refine with 503.
"""

import argparse
import os

import uvicorn

from .app import create_app


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="sam-service")
    parser.add_argument("--host", default="127.0.0.1")
    parser.add_argument("--port", type=int, default=8008)
    parser.add_argument("--stub", action="store_true", help="serve geometric stub masks (no weights)")
    parser.add_argument("--weights", default=os.environ.get("SAM_SERVICE_WEIGHTS"),
                        help="segment-anything checkpoint path (env: SAM_SERVICE_WEIGHTS)")
    args = parser.parse_args(argv)
    app = create_app(stub=args.stub, weights_path=args.weights)
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
