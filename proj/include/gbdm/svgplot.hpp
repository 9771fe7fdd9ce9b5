#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <string>
#include <vector>

#include "gbdm/tensor.hpp"  // GbdmError

namespace gbdm::svg {

// Minimal deterministic SVG line plots: fixed layout, fixed number formatting,
// no timestamps — identical inputs yield identical bytes.

struct Series {
    std::string label;
    std::string color = "#1f77b4";
    double width = 1.5;
    std::vector<double> x, y;
};

// shaded region between lo(x) and hi(x), drawn behind the series
struct Band {
    std::string color = "#1f77b4";
    double opacity = 0.2;
    std::vector<double> x, lo, hi;
};

// vertical error bar at (x, lo..hi)
struct ErrorBar {
    std::string color = "#1f77b4";
    double x = 0.0, lo = 0.0, hi = 0.0;
};

struct Plot {
    std::string title, xlabel, ylabel;
    std::vector<Series> series;
    std::vector<Band> bands;
    std::vector<ErrorBar> error_bars;
    bool log_x = false;
};

namespace detail {

inline std::string num(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.6g", v);
    return buf;
}

struct Limits {
    double xmin = 0.0, xmax = 1.0, ymin = 0.0, ymax = 1.0;

    void include(double x, double y) {
        if (!std::isfinite(x) || !std::isfinite(y)) return;
        if (!seen) {
            xmin = xmax = x;
            ymin = ymax = y;
            seen = true;
            return;
        }
        xmin = std::min(xmin, x);
        xmax = std::max(xmax, x);
        ymin = std::min(ymin, y);
        ymax = std::max(ymax, y);
    }
    bool seen = false;
};

}  // namespace detail

inline std::string render(const Plot& plot) {
    const double W = 640, H = 420, ml = 70, mr = 20, mt = 40, mb = 50;
    detail::Limits lim;
    auto tx = [&](double x) { return plot.log_x ? std::log10(x) : x; };
    for (const auto& s : plot.series)
        for (size_t i = 0; i < s.x.size(); ++i) lim.include(tx(s.x[i]), s.y[i]);
    for (const auto& b : plot.bands)
        for (size_t i = 0; i < b.x.size(); ++i) {
            lim.include(tx(b.x[i]), b.lo[i]);
            lim.include(tx(b.x[i]), b.hi[i]);
        }
    for (const auto& e : plot.error_bars) {
        lim.include(tx(e.x), e.lo);
        lim.include(tx(e.x), e.hi);
    }
    if (!lim.seen) throw GbdmError("svg: nothing to plot in '" + plot.title + "'");
    double xr = lim.xmax - lim.xmin, yr = lim.ymax - lim.ymin;
    if (xr <= 0.0) xr = 1.0;
    if (yr <= 0.0) yr = 1.0;
    // pad the y range so flat series are visible
    double x0 = lim.xmin - 0.02 * xr, x1 = lim.xmax + 0.02 * xr;
    double y0 = lim.ymin - 0.05 * yr, y1 = lim.ymax + 0.05 * yr;

    auto px = [&](double x) { return ml + (tx(x) - x0) / (x1 - x0) * (W - ml - mr); };
    auto py = [&](double y) { return H - mb - (y - y0) / (y1 - y0) * (H - mt - mb); };

    std::string out;
    out += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + detail::num(W) +
           "\" height=\"" + detail::num(H) + "\" viewBox=\"0 0 " + detail::num(W) + " " +
           detail::num(H) + "\">\n";
    out += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    out += "<text x=\"" + detail::num(W / 2) + "\" y=\"24\" text-anchor=\"middle\" "
           "font-family=\"sans-serif\" font-size=\"16\">" + plot.title + "</text>\n";

    // axes + ticks (5 per axis, value labels in the same %.6g format)
    out += "<line x1=\"" + detail::num(ml) + "\" y1=\"" + detail::num(H - mb) + "\" x2=\"" +
           detail::num(W - mr) + "\" y2=\"" + detail::num(H - mb) +
           "\" stroke=\"black\" stroke-width=\"1\"/>\n";
    out += "<line x1=\"" + detail::num(ml) + "\" y1=\"" + detail::num(mt) + "\" x2=\"" +
           detail::num(ml) + "\" y2=\"" + detail::num(H - mb) +
           "\" stroke=\"black\" stroke-width=\"1\"/>\n";
    for (int i = 0; i <= 4; ++i) {
        double fx = x0 + (x1 - x0) * i / 4.0;
        double fy = y0 + (y1 - y0) * i / 4.0;
        double gx = ml + (W - ml - mr) * i / 4.0;
        double gy = H - mb - (H - mt - mb) * i / 4.0;
        double label_x = plot.log_x ? std::pow(10.0, fx) : fx;
        out += "<line x1=\"" + detail::num(gx) + "\" y1=\"" + detail::num(H - mb) + "\" x2=\"" +
               detail::num(gx) + "\" y2=\"" + detail::num(H - mb + 5) + "\" stroke=\"black\"/>\n";
        out += "<text x=\"" + detail::num(gx) + "\" y=\"" + detail::num(H - mb + 18) +
               "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"10\">" +
               detail::num(label_x) + "</text>\n";
        out += "<line x1=\"" + detail::num(ml - 5) + "\" y1=\"" + detail::num(gy) + "\" x2=\"" +
               detail::num(ml) + "\" y2=\"" + detail::num(gy) + "\" stroke=\"black\"/>\n";
        out += "<text x=\"" + detail::num(ml - 8) + "\" y=\"" + detail::num(gy + 3) +
               "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"10\">" +
               detail::num(fy) + "</text>\n";
    }
    out += "<text x=\"" + detail::num((ml + W - mr) / 2) + "\" y=\"" + detail::num(H - 12) +
           "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">" +
           plot.xlabel + "</text>\n";
    out += "<text x=\"16\" y=\"" + detail::num((mt + H - mb) / 2) +
           "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\" transform=\"rotate(-90 16 " +
           detail::num((mt + H - mb) / 2) + ")\">" + plot.ylabel + "</text>\n";

    for (const auto& b : plot.bands) {
        if (b.x.size() != b.lo.size() || b.x.size() != b.hi.size() || b.x.empty())
            throw GbdmError("svg: malformed band in '" + plot.title + "'");
        std::string pts;
        for (size_t i = 0; i < b.x.size(); ++i)
            pts += detail::num(px(b.x[i])) + "," + detail::num(py(b.hi[i])) + " ";
        for (size_t i = b.x.size(); i-- > 0;)
            pts += detail::num(px(b.x[i])) + "," + detail::num(py(b.lo[i])) + " ";
        out += "<polygon points=\"" + pts + "\" fill=\"" + b.color + "\" fill-opacity=\"" +
               detail::num(b.opacity) + "\" stroke=\"none\"/>\n";
    }
    for (const auto& e : plot.error_bars) {
        out += "<line x1=\"" + detail::num(px(e.x)) + "\" y1=\"" + detail::num(py(e.lo)) +
               "\" x2=\"" + detail::num(px(e.x)) + "\" y2=\"" + detail::num(py(e.hi)) +
               "\" stroke=\"" + e.color + "\" stroke-width=\"1.5\"/>\n";
        for (double yy : {e.lo, e.hi})
            out += "<line x1=\"" + detail::num(px(e.x) - 4) + "\" y1=\"" + detail::num(py(yy)) +
                   "\" x2=\"" + detail::num(px(e.x) + 4) + "\" y2=\"" + detail::num(py(yy)) +
                   "\" stroke=\"" + e.color + "\" stroke-width=\"1.5\"/>\n";
    }
    for (const auto& s : plot.series) {
        if (s.x.size() != s.y.size() || s.x.empty())
            throw GbdmError("svg: malformed series '" + s.label + "' in '" + plot.title + "'");
        std::string pts;
        for (size_t i = 0; i < s.x.size(); ++i)
            pts += detail::num(px(s.x[i])) + "," + detail::num(py(s.y[i])) + " ";
        out += "<polyline points=\"" + pts + "\" fill=\"none\" stroke=\"" + s.color +
               "\" stroke-width=\"" + detail::num(s.width) + "\"/>\n";
    }
    // legend, top-right, one row per labelled series
    double ly = mt + 10;
    for (const auto& s : plot.series) {
        if (s.label.empty()) continue;
        out += "<line x1=\"" + detail::num(W - mr - 150) + "\" y1=\"" + detail::num(ly) +
               "\" x2=\"" + detail::num(W - mr - 126) + "\" y2=\"" + detail::num(ly) +
               "\" stroke=\"" + s.color + "\" stroke-width=\"2\"/>\n";
        out += "<text x=\"" + detail::num(W - mr - 120) + "\" y=\"" + detail::num(ly + 4) +
               "\" font-family=\"sans-serif\" font-size=\"11\">" + s.label + "</text>\n";
        ly += 16;
    }
    out += "</svg>\n";
    return out;
}

inline const char* palette(size_t i) {
    static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd",
                                   "#ff7f0e", "#8c564b", "#e377c2", "#7f7f7f"};
    return colors[i % 8];
}

}  // namespace gbdm::svg
