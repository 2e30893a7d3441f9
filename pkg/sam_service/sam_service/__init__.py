"""HTTP mask-refinement microservice.

Wire protocol:

* ``POST /refine`` with JSON ``{"image_png_b64": str,
  "box": [x0, y0, x1, y1] | null,
  "points": [{"x": int, "y": int, "label": 1|0}]}``
  returns ``{"mask_png_b64": str}``: a PNG with the exact dimensions of the
  request image, 0 = background, 255 = foreground.
* ``GET /health`` returns 200 ``ok``.

Errors: 400 malformed request, 422 out-of-bounds prompts, 503 model not
loaded (stub mode disabled).

Without model weights the service runs in ``--stub`` mode: a box prompt
returns the filled box, a point-only prompt returns the positive point's
8-connected color-similar region. Handlers are stateless; responses depend
only on the request and the loaded weights.
"""

from .app import create_app

__version__ = "0.1.0"
__all__ = ["create_app", "__version__"]
