"""Independent vectorized transcription of the published CG-EGA grids.

This is the normative test oracle: zone regions are written as boolean
masks resolved with np.select, and the per-region combination uses literal
8x5 filter matrices (rate zones x point zones), mirroring the structure of
the reference implementation this grid was published with.  The package's
scalar decision-chain implementation must agree with this transcription on
every point.
"""

import numpy as np

P5 = ("A", "B", "C", "D", "E")
R8 = ("A", "B", "uC", "lC", "uD", "lD", "uE", "lE")


def boundary_mods(dy_true):
    """Upper-limit raise (falling reference) and lower-limit drop (rising)."""
    dy_true = np.asarray(dy_true, dtype=float)
    up = np.zeros_like(dy_true)
    down = np.zeros_like(dy_true)
    up[(dy_true >= -2.0) & (dy_true <= -1.0)] = 10.0
    up[dy_true < -2.0] = 20.0
    down[(dy_true >= 1.0) & (dy_true <= 2.0)] = 10.0
    down[dy_true > 2.0] = 20.0
    return up, down


def p_ega_zones(y_true, y_pred, dy_true):
    """Point grid zones with u/l splits, as an array of label strings."""
    y_true = np.asarray(y_true, dtype=float)
    y_pred = np.asarray(y_pred, dtype=float)
    up, down = boundary_mods(dy_true)

    zone_a = ((y_true <= 70.0) & (y_pred <= 70.0 + up)) | (
        (y_pred <= 1.2 * y_true + up) & (y_pred >= 0.8 * y_true - down))
    zone_ue = (y_true <= 70.0) & (y_pred >= 180.0 + up)
    zone_le = (y_true >= 180.0) & (y_pred <= 70.0 - down)
    zone_uc = (y_true >= 70.0) & (y_true <= 290.0) & (y_pred >= y_true + 110.0 + up)
    zone_lc = (y_true >= 130.0) & (y_true <= 180.0) & (y_pred <= 1.4 * y_true - 182.0 - down)
    zone_ud = ((y_true <= 175.0 / 3.0) & (y_pred >= 70.0 + up) & (y_pred <= 180.0 + up)) | (
        (y_true >= 175.0 / 3.0) & (y_true <= 70.0)
        & (y_pred >= 1.2 * y_true + up) & (y_pred <= 180.0 + up))
    zone_ld = (y_true >= 240.0) & (y_pred >= 70.0 - down) & (y_pred <= 180.0 - down)

    return np.select(
        [zone_a, zone_ue, zone_le, zone_uc, zone_lc, zone_ud, zone_ld],
        ["A", "uE", "lE", "uC", "lC", "uD", "lD"],
        default="B",
    )


def r_ega_zones(dy_true, dy_pred):
    """Rate grid zones as an array of label strings."""
    dt = np.asarray(dy_true, dtype=float)
    dp = np.asarray(dy_pred, dtype=float)

    band = np.abs(dp - dt) <= 1.0
    wedge = ((dt > 0.0) & (dp >= 0.5 * dt) & (dp <= 2.0 * dt)) | (
        (dt < 0.0) & (dp >= 2.0 * dt) & (dp <= 0.5 * dt))
    zone_a = band | wedge
    zone_ue = (dp > 1.0) & (dt < -1.0)
    zone_le = (dp < -1.0) & (dt > 1.0)
    zone_uc = (dt >= -1.0) & (dt <= 1.0) & (dp > dt + 2.0)
    zone_lc = (dt >= -1.0) & (dt <= 1.0) & (dp < dt - 2.0)
    zone_ud = (dp >= -1.0) & (dp <= 1.0) & (dt < dp - 2.0)
    zone_ld = (dp >= -1.0) & (dp <= 1.0) & (dt > dp + 2.0)

    return np.select(
        [zone_a, zone_ue, zone_le, zone_uc, zone_lc, zone_ud, zone_ld],
        ["A", "uE", "lE", "uC", "lC", "uD", "lD"],
        default="B",
    )


# Combination filters: rows = R8 zones, columns = P5 zones.  A prediction is
# accurate when both grids score A/B, benign when the point score stays A/B
# while the rate degrades to C/D, erroneous otherwise.  In hypoglycemia the
# point grid cannot produce B (the A square adjoins D directly); in
# euglycemia it cannot produce D or E; the unreachable columns are kept so
# the filters stay total.
_AP_ROWS = np.array([
    [1, 1, 0, 0, 0],
    [1, 1, 0, 0, 0],
    [0, 0, 0, 0, 0],
    [0, 0, 0, 0, 0],
    [0, 0, 0, 0, 0],
    [0, 0, 0, 0, 0],
    [0, 0, 0, 0, 0],
    [0, 0, 0, 0, 0],
])
_BE_ROWS = np.array([
    [0, 0, 0, 0, 0],
    [0, 0, 0, 0, 0],
    [1, 1, 0, 0, 0],
    [1, 1, 0, 0, 0],
    [1, 1, 0, 0, 0],
    [1, 1, 0, 0, 0],
    [0, 0, 0, 0, 0],
    [0, 0, 0, 0, 0],
])

FILTER_AP_HYPO = _AP_ROWS.copy()
FILTER_BE_HYPO = _BE_ROWS.copy()
FILTER_EP_HYPO = 1 - FILTER_AP_HYPO - FILTER_BE_HYPO

FILTER_AP_EU = _AP_ROWS.copy()
FILTER_BE_EU = _BE_ROWS.copy()
FILTER_EP_EU = 1 - FILTER_AP_EU - FILTER_BE_EU

FILTER_AP_HYPER = _AP_ROWS.copy()
FILTER_BE_HYPER = _BE_ROWS.copy()
FILTER_EP_HYPER = 1 - FILTER_AP_HYPER - FILTER_BE_HYPER

_FILTERS = {
    "hypo": (FILTER_AP_HYPO, FILTER_BE_HYPO, FILTER_EP_HYPO),
    "eu": (FILTER_AP_EU, FILTER_BE_EU, FILTER_EP_EU),
    "hyper": (FILTER_AP_HYPER, FILTER_BE_HYPER, FILTER_EP_HYPER),
}


def regions(y_true):
    y_true = np.asarray(y_true, dtype=float)
    return np.select([y_true <= 70.0, y_true >= 180.0], ["hypo", "hyper"], default="eu")


def merge_p5(p_zone: str) -> str:
    return p_zone[-1]  # uC -> C etc.


def classify(p_zone: str, r_zone: str, region: str) -> str:
    row = R8.index(r_zone)
    col = P5.index(merge_p5(p_zone))
    filter_ap, filter_be, filter_ep = _FILTERS[region]
    if filter_ap[row, col]:
        return "AP"
    if filter_be[row, col]:
        return "BE"
    assert filter_ep[row, col]
    return "EP"


def full_cg_ega(y_true, y_pred, dy_true, dy_pred):
    """Zones and labels for a batch; the complete oracle pipeline."""
    p_zones = p_ega_zones(y_true, y_pred, dy_true)
    r_zones = r_ega_zones(dy_true, dy_pred)
    regs = regions(y_true)
    labels = np.array([classify(p, r, g) for p, r, g in zip(p_zones, r_zones, regs)])
    return p_zones, r_zones, regs, labels
