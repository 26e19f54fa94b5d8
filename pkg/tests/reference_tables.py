"""Published result grids used as rendering fixtures.

Each row: per-class accuracy, sensitivity, specificity in Normal/Exudates/Drusen order.
"""

BOVW_GRID = {
    100: ([75.02, 75.37, 98.77], [74.20, 69.42, 88.98], [77.72, 76.49, 99.71]),
    200: ([77.14, 77.32, 99.12], [77.39, 68.98, 95.46], [76.75, 79.69, 99.44]),
    300: ([76.96, 77.05, 99.21], [78.58, 66.24, 92.71], [73.81, 80.55, 99.81]),
    400: ([78.63, 78.81, 99.65], [79.68, 70.17, 95.78], [76.51, 81.65, 100.00]),
    500: ([79.79, 80.05, 99.56], [80.97, 71.79, 98.75], [77.96, 83.13, 99.62]),
}
BOVW_MAX = "| Max | 79.79 | 80.05 | 99.65 | 80.97 | 71.79 | 98.75 | 77.96 | 83.13 | 100.00 |"

DEEP_GRID = {
    "VGG": ([86.59, 86.59, 99.82], [95.90, 64.82, 98.22], [71.58, 96.26, 100.0]),
    "VGG-VD": ([85.41, 85.14, 99.74], [94.08, 67.27, 99.00], [74.25, 94.59, 99.80]),
    "GoogLeNet": ([88.17, 88.17, 99.65], [96.02, 70.36, 97.00], [75.79, 96.33, 99.90]),
    "ResNet": ([86.94, 86.94, 99.82], [94.27, 69.47, 98.75], [75.35, 94.89, 99.91]),
}

# overall accuracy, mean and std over folds
OVERALL = {
    "BoVW": (77.76, 1.97),
    "VGG": (91.83, 2.93),
    "VGG-VD": (90.76, 1.93),
    "GoogLeNet": (92.00, 1.53),
    "ResNet": (91.23, 1.07),
}


def fixture_reports():
    from retina_bench.evaluation import report_from_summary

    bovw = []
    for w, (a, s, p) in BOVW_GRID.items():
        # the overall line is only shown for the published BoVW entry
        om, osd = OVERALL["BoVW"] if w == 500 else (0.0, 0.0)
        bovw.append(report_from_summary("bovw", f"W={w}", a, s, p, om, osd))
    deep = [report_from_summary("deep", m, *DEEP_GRID[m], *OVERALL[m]) for m in DEEP_GRID]
    return bovw, deep


def row(name, values):
    return "| " + " | ".join([str(name), *(f"{v:.2f}" for v in values)]) + " |"
