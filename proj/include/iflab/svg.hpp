#pragma once

// Self-contained SVG line charts. No plotting dependency: charts are plain
// text with a machine-readable <metadata> block holding the exact plotted
// values, so tests can parse a chart back and compare against its CSV.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <string>
#include <vector>

#include "common.hpp"

namespace iflab {

struct Series {
    std::string name;
    std::vector<double> x, y;
};

struct ChartOptions {
    std::string title;
    std::string x_label;
    std::string y_label;
    int width = 960;
    int height = 540;
};

namespace svg_detail {

constexpr double kMarginLeft = 72, kMarginRight = 200, kMarginTop = 48, kMarginBottom = 56;

inline const char* palette(int i) {
    static const char* kColors[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
                                    "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
                                    "#393b79", "#ad494a"};
    return kColors[i % 12];
}

inline std::string xml_escape(const std::string& s) {
    std::string out;
    for (char c : s) {
        if (c == '&') out += "&amp;";
        else if (c == '<') out += "&lt;";
        else if (c == '>') out += "&gt;";
        else if (c == '"') out += "&quot;";
        else out += c;
    }
    return out;
}

inline std::string fixed2(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.2f", v);
    return buf;
}

// largest 1/2/5 x 10^k step that yields at least `target` intervals
inline double nice_step(double span, int target) {
    if (span <= 0) return 1.0;
    double rough = span / target;
    double mag = std::pow(10.0, std::floor(std::log10(rough)));
    for (double m : {5.0, 2.0, 1.0})
        if (m * mag <= rough) return m * mag;
    return mag / 2;
}

struct Scale {
    double lo = 0, hi = 1, px0 = 0, px1 = 1;
    double operator()(double v) const { return px0 + (v - lo) / (hi - lo) * (px1 - px0); }
};

inline Scale make_scale(double lo, double hi, double px0, double px1) {
    if (lo == hi) {  // degenerate range: pad by one unit (or 10% of magnitude)
        double pad = std::max(0.5, std::abs(lo) * 0.05);
        lo -= pad;
        hi += pad;
    } else {
        double pad = (hi - lo) * 0.04;
        lo -= pad;
        hi += pad;
    }
    return Scale{lo, hi, px0, px1};
}

}  // namespace svg_detail

// Line chart over one or more series. Every (x, y) must be finite; series
// must be non-empty and x/y equal length.
inline std::string line_chart_svg(const std::vector<Series>& series, const ChartOptions& opt) {
    using namespace svg_detail;
    if (series.empty()) throw ConfigError("chart: no series");
    double xmin = 0, xmax = 0, ymin = 0, ymax = 0;
    bool first = true;
    for (const auto& s : series) {
        if (s.x.empty()) throw ConfigError("chart: empty series " + s.name);
        if (s.x.size() != s.y.size())
            throw ConfigError("chart: x/y length mismatch in series " + s.name);
        for (size_t i = 0; i < s.x.size(); ++i) {
            if (!std::isfinite(s.x[i]) || !std::isfinite(s.y[i]))
                throw ConfigError("chart: non-finite value in series " + s.name);
            if (first) {
                xmin = xmax = s.x[i];
                ymin = ymax = s.y[i];
                first = false;
            }
            xmin = std::min(xmin, s.x[i]);
            xmax = std::max(xmax, s.x[i]);
            ymin = std::min(ymin, s.y[i]);
            ymax = std::max(ymax, s.y[i]);
        }
    }

    const double w = opt.width, h = opt.height;
    Scale sx = make_scale(xmin, xmax, kMarginLeft, w - kMarginRight);
    Scale sy = make_scale(ymin, ymax, h - kMarginBottom, kMarginTop);  // y grows upward

    std::string out;
    out += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + std::to_string(opt.width) +
           "\" height=\"" + std::to_string(opt.height) + "\" viewBox=\"0 0 " +
           std::to_string(opt.width) + " " + std::to_string(opt.height) + "\">\n";

    // exact values, one line per point, for round-trip checks
    out += "<metadata id=\"chart-values\"><![CDATA[\nseries,x,y\n";
    for (const auto& s : series)
        for (size_t i = 0; i < s.x.size(); ++i)
            out += s.name + "," + format_double(s.x[i]) + "," + format_double(s.y[i]) + "\n";
    out += "]]></metadata>\n";

    out += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    out += "<text x=\"" + fixed2(w / 2) + "\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"16\">" +
           xml_escape(opt.title) + "</text>\n";

    // gridlines + tick labels
    double ystep = nice_step(sy.hi - sy.lo, 6);
    double y0 = std::ceil(sy.lo / ystep) * ystep;
    for (double v = y0; v <= sy.hi + 1e-12 * ystep; v += ystep) {
        double py = sy(v);
        out += "<line x1=\"" + fixed2(kMarginLeft) + "\" y1=\"" + fixed2(py) + "\" x2=\"" +
               fixed2(w - kMarginRight) + "\" y2=\"" + fixed2(py) +
               "\" stroke=\"#dddddd\" stroke-width=\"1\"/>\n";
        out += "<text x=\"" + fixed2(kMarginLeft - 8) + "\" y=\"" + fixed2(py + 4) +
               "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\">" +
               format_double(v, 4) + "</text>\n";
    }
    double xstep = nice_step(sx.hi - sx.lo, 7);
    double x0 = std::ceil(sx.lo / xstep) * xstep;
    for (double v = x0; v <= sx.hi + 1e-12 * xstep; v += xstep) {
        double px = sx(v);
        out += "<line x1=\"" + fixed2(px) + "\" y1=\"" + fixed2(kMarginTop) + "\" x2=\"" +
               fixed2(px) + "\" y2=\"" + fixed2(h - kMarginBottom) +
               "\" stroke=\"#eeeeee\" stroke-width=\"1\"/>\n";
        out += "<text x=\"" + fixed2(px) + "\" y=\"" + fixed2(h - kMarginBottom + 18) +
               "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"11\">" +
               format_double(v, 4) + "</text>\n";
    }

    // axes
    out += "<line x1=\"" + fixed2(kMarginLeft) + "\" y1=\"" + fixed2(kMarginTop) + "\" x2=\"" +
           fixed2(kMarginLeft) + "\" y2=\"" + fixed2(h - kMarginBottom) +
           "\" stroke=\"black\" stroke-width=\"1.5\"/>\n";
    out += "<line x1=\"" + fixed2(kMarginLeft) + "\" y1=\"" + fixed2(h - kMarginBottom) +
           "\" x2=\"" + fixed2(w - kMarginRight) + "\" y2=\"" + fixed2(h - kMarginBottom) +
           "\" stroke=\"black\" stroke-width=\"1.5\"/>\n";
    out += "<text x=\"" + fixed2((kMarginLeft + w - kMarginRight) / 2) + "\" y=\"" +
           fixed2(h - 14) + "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"13\">" +
           xml_escape(opt.x_label) + "</text>\n";
    out += "<text x=\"20\" y=\"" + fixed2((kMarginTop + h - kMarginBottom) / 2) +
           "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"13\" transform=\"rotate(-90 20 " +
           fixed2((kMarginTop + h - kMarginBottom) / 2) + ")\">" + xml_escape(opt.y_label) +
           "</text>\n";

    // one polyline + legend row per series
    for (size_t si = 0; si < series.size(); ++si) {
        const Series& s = series[si];
        const char* color = palette(static_cast<int>(si));
        std::string pts;
        for (size_t i = 0; i < s.x.size(); ++i)
            pts += fixed2(sx(s.x[i])) + "," + fixed2(sy(s.y[i])) + " ";
        out += "<polyline points=\"" + pts + "\" fill=\"none\" stroke=\"" + color +
               "\" stroke-width=\"1.8\"/>\n";
        if (s.x.size() == 1)  // a lone point would otherwise be invisible
            out += "<circle cx=\"" + fixed2(sx(s.x[0])) + "\" cy=\"" + fixed2(sy(s.y[0])) +
                   "\" r=\"3\" fill=\"" + std::string(color) + "\"/>\n";
        double ly = kMarginTop + 16 + 18 * static_cast<double>(si);
        out += "<line x1=\"" + fixed2(w - kMarginRight + 12) + "\" y1=\"" + fixed2(ly - 4) +
               "\" x2=\"" + fixed2(w - kMarginRight + 34) + "\" y2=\"" + fixed2(ly - 4) +
               "\" stroke=\"" + color + "\" stroke-width=\"2\"/>\n";
        out += "<text x=\"" + fixed2(w - kMarginRight + 40) + "\" y=\"" + fixed2(ly) +
               "\" font-family=\"sans-serif\" font-size=\"12\">" + xml_escape(s.name) +
               "</text>\n";
    }
    out += "</svg>\n";
    return out;
}

// Parses the exact-value block back out of a chart produced above:
// (series, x, y) rows in emission order.
inline std::vector<std::tuple<std::string, double, double>> chart_values(const std::string& svg) {
    const std::string open = "<metadata id=\"chart-values\"><![CDATA[\nseries,x,y\n";
    const std::string close = "]]></metadata>";
    size_t a = svg.find(open);
    size_t b = svg.find(close);
    if (a == std::string::npos || b == std::string::npos || b < a)
        throw IntegrityError("chart: missing values metadata");
    std::vector<std::tuple<std::string, double, double>> rows;
    size_t pos = a + open.size();
    while (pos < b) {
        size_t eol = svg.find('\n', pos);
        std::string line = svg.substr(pos, eol - pos);
        pos = eol + 1;
        if (line.empty()) continue;
        size_t c1 = line.rfind(',');
        size_t c0 = line.rfind(',', c1 - 1);
        if (c0 == std::string::npos || c1 == std::string::npos)
            throw IntegrityError("chart: malformed values row: " + line);
        rows.emplace_back(line.substr(0, c0), std::stod(line.substr(c0 + 1, c1 - c0 - 1)),
                          std::stod(line.substr(c1 + 1)));
    }
    return rows;
}

}  // namespace iflab
