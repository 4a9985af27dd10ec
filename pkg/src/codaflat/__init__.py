"""codaflat: numerics for Codazzi tensors on hyperbolic surfaces and
convex Cauchy surfaces in flat (2+1)-dimensional space-times."""

__version__ = "0.1.0"

#: Conventions frozen by the library; embedded in every report.
CONVENTIONS = {
    "box_product": "<u box v, w> = det(u, v, w)",
    "J_orientation": "J v = x box v on the tangent plane at x",
    "rotated_qdiff_sign": -1.0,
    "future_normal": "<G, (0,0,1)> < 0",
}
