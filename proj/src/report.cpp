#include <algorithm>
#include <cstdio>
#include <map>
#include <sstream>

#include "unitscope/io.hpp"
#include "unitscope/pipeline.hpp"

namespace unitscope {

namespace {

std::string escape(const std::string& s)
{
    std::string out;
    for (char c : s) {
        switch (c) {
        case '&': out += "&amp;"; break;
        case '<': out += "&lt;"; break;
        case '>': out += "&gt;"; break;
        case '"': out += "&quot;"; break;
        default: out += c;
        }
    }
    return out;
}

std::string fmt(double v, int digits = 3)
{
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.*f", digits, v);
    return buf;
}

std::string img_tag(const Workspace& ws, const std::string& relative, const std::string& alt)
{
    const auto p = ws.path(relative);
    if (!std::filesystem::exists(p)) return "";
    return "<img alt=\"" + escape(alt) + "\" src=\"data:image/png;base64," + base64_encode(read_file(p)) + "\">";
}

struct Series {
    std::string name;
    std::string color;
    std::vector<std::pair<double, double>> points;
};

/// Line chart with x in data units and y in [0, 1].
std::string line_chart(const std::vector<Series>& series, const std::string& x_label, const std::string& y_label)
{
    const double W = 420, H = 240, L = 48, R = 12, T = 12, B = 36;
    double xmax = 1.0;
    for (const auto& s : series)
        for (const auto& [x, y] : s.points) xmax = std::max(xmax, x);
    auto px = [&](double x) { return L + (W - L - R) * x / xmax; };
    auto py = [&](double y) { return T + (H - T - B) * (1.0 - std::clamp(y, 0.0, 1.0)); };
    std::ostringstream o;
    o << "<svg width=\"" << W << "\" height=\"" << H << "\">";
    o << "<rect x=\"" << L << "\" y=\"" << T << "\" width=\"" << W - L - R << "\" height=\"" << H - T - B
      << "\" fill=\"none\" stroke=\"#999\"/>";
    for (double y : {0.0, 0.25, 0.5, 0.75, 1.0})
        o << "<text x=\"" << L - 6 << "\" y=\"" << py(y) + 4 << "\" font-size=\"10\" text-anchor=\"end\">" << fmt(y, 2)
          << "</text>";
    o << "<text x=\"" << L << "\" y=\"" << H - 20 << "\" font-size=\"10\">0</text>";
    o << "<text x=\"" << W - R << "\" y=\"" << H - 20 << "\" font-size=\"10\" text-anchor=\"end\">" << fmt(xmax, 0)
      << "</text>";
    o << "<text x=\"" << (W + L) / 2 << "\" y=\"" << H - 4 << "\" font-size=\"11\" text-anchor=\"middle\">"
      << escape(x_label) << "</text>";
    o << "<text x=\"12\" y=\"" << (H - B) / 2 << "\" font-size=\"11\" transform=\"rotate(-90 12 " << (H - B) / 2
      << ")\" text-anchor=\"middle\">" << escape(y_label) << "</text>";
    int legend = 0;
    for (const auto& s : series) {
        o << "<polyline fill=\"none\" stroke=\"" << s.color << "\" stroke-width=\"1.5\" points=\"";
        for (const auto& [x, y] : s.points) o << px(x) << "," << py(y) << " ";
        o << "\"/>";
        o << "<text x=\"" << W - R - 4 << "\" y=\"" << T + 14 + 13 * legend++ << "\" font-size=\"10\" fill=\""
          << s.color << "\" text-anchor=\"end\">" << escape(s.name) << "</text>";
    }
    o << "</svg>";
    return o.str();
}

/// Horizontal bars, values in [0, vmax].
std::string bar_chart(const std::vector<std::pair<std::string, double>>& bars, double vmax)
{
    const double W = 420, row = 18, L = 110;
    std::ostringstream o;
    o << "<svg width=\"" << W << "\" height=\"" << row * bars.size() + 4 << "\">";
    for (std::size_t i = 0; i < bars.size(); ++i) {
        const double y = row * static_cast<double>(i);
        const double w = vmax > 0 ? (W - L - 50) * std::clamp(bars[i].second / vmax, 0.0, 1.0) : 0.0;
        o << "<text x=\"" << L - 6 << "\" y=\"" << y + 13 << "\" font-size=\"11\" text-anchor=\"end\">"
          << escape(bars[i].first) << "</text>";
        o << "<rect x=\"" << L << "\" y=\"" << y + 3 << "\" width=\"" << w << "\" height=\"" << row - 6
          << "\" fill=\"#4a7ab5\"/>";
        o << "<text x=\"" << L + w + 4 << "\" y=\"" << y + 13 << "\" font-size=\"10\">" << fmt(bars[i].second, 3)
          << "</text>";
    }
    o << "</svg>";
    return o.str();
}

std::string interval_text(const nlohmann::json& j)
{
    return fmt(j.at("mean").get<double>()) + " [" + fmt(j.at("lo").get<double>()) + ", " +
           fmt(j.at("hi").get<double>()) + "]";
}

std::string table(const std::vector<std::string>& head, const std::vector<std::vector<std::string>>& rows)
{
    std::string o = "<table><tr>";
    for (const auto& h : head) o += "<th>" + escape(h) + "</th>";
    o += "</tr>";
    for (const auto& r : rows) {
        o += "<tr>";
        for (const auto& c : r) o += "<td>" + escape(c) + "</td>";
        o += "</tr>";
    }
    return o + "</table>";
}

std::string dissection_section(const Workspace& ws, const nlohmann::json& summary)
{
    std::string o;
    for (const auto& layer : summary.at("layers")) {
        const std::string name = layer.at("layer").get<std::string>();
        o += "<h3>" + escape(name) + "</h3><p>" + std::to_string(layer.at("matched").get<int>()) + " of " +
             std::to_string(layer.at("units").get<int>()) + " units matched a concept.</p>";
        std::vector<std::vector<std::string>> rows;
        for (const auto& [cat, n] : layer.at("units_per_category").items())
            rows.push_back({cat, std::to_string(n.get<int>()),
                            std::to_string(layer.at("distinct_concepts").value(cat, 0))});
        o += table({"category", "units", "distinct concepts"}, rows);
        for (const auto& ex : layer.value("exemplars", nlohmann::json::array()))
            o += "<figure>" + img_tag(ws, ex.at("image").get<std::string>(), "exemplars") + "<figcaption>unit " +
                 std::to_string(ex.at("unit").get<int>()) + ": " + escape(ex.at("concept").get<std::string>()) + " (IoU " +
                 fmt(ex.at("score").get<double>()) + ")</figcaption></figure>";
    }
    return o;
}

} // namespace

void render_report(const Workspace& ws)
{
    const auto corpus = ws.read_json("corpus/summary.json");
    const auto cls = ws.read_json("models/classifier.json");
    const auto seg = ws.read_json("models/segmenter.json");
    const auto gen = ws.read_json("models/generator.json");
    const auto dc = ws.read_json("dissect/classifier/summary.json");
    const auto dg = ws.read_json("dissect/generator/summary.json");
    const auto causal = ws.read_json("intervene/causal_summary.json");
    const auto curves = ws.read_json("intervene/ablation_curves.json");
    const auto gsum = ws.read_json("intervene/generator_summary.json");
    const auto ctx = ws.read_json("intervene/context_map.json");
    const auto atk = ws.read_json("attack/summary.json");
    const auto attacks = ws.read_json("attack/attacks.json");

    std::ostringstream h;
    h << "<!DOCTYPE html><html><head><meta charset=\"utf-8\"><title>unitscope report</title><style>"
         "body{font-family:sans-serif;max-width:960px;margin:2em auto;color:#222}"
         "table{border-collapse:collapse;margin:.5em 0}td,th{border:1px solid #ccc;padding:2px 8px;font-size:13px}"
         "figure{display:inline-block;margin:4px}figcaption{font-size:12px}img{image-rendering:pixelated}"
         "</style></head><body>";
    h << "<h1>unitscope report</h1><p>Configuration hash " << escape(corpus.at("config_hash").get<std::string>()) << ", seed "
      << ws.config().seed << ".</p>";

    h << "<h2>Data and models</h2><p>" << corpus.at("train").get<int>() << " training and "
      << corpus.at("val").get<int>() << " validation scenes in " << corpus.at("classes").size() << " classes.</p>"
      << img_tag(ws, "corpus/samples.png", "corpus samples");
    {
        std::vector<std::pair<double, double>> acc;
        for (const auto& e : cls.at("epochs"))
            acc.emplace_back(e.at("epoch").get<double>() + 1.0, e.at("val_accuracy").get<double>());
        h << "<p>Classifier validation accuracy " << fmt(cls.at("val_accuracy").get<double>()) << ".</p>"
          << line_chart({{"val accuracy", "#4a7ab5", acc}}, "epoch", "accuracy");
    }
    h << "<p>Reference segmenter mean object IoU "
      << fmt(seg.at("quality").at("mean_object_iou").get<double>()) << ". Generator reconstruction MSE "
      << fmt(gen.at("val_reconstruction_mse").get<double>(), 5) << ".</p>"
      << img_tag(ws, "models/generator_samples.png", "generator samples");

    h << "<h2>Classifier dissection</h2>" << dissection_section(ws, dc);
    {
        std::vector<std::vector<std::string>> rows;
        for (const auto& u : dc.at("unit_classifiers"))
            rows.push_back({u.at("concept").get<std::string>(), std::to_string(u.at("unit").get<int>()), fmt(u.at("iou").get<double>()),
                            fmt(u.at("balanced_accuracy").get<double>())});
        h << "<h3>Single units as object detectors</h3>"
          << table({"concept", "unit", "IoU", "balanced accuracy"}, rows);
    }

    h << "<h2>Generator dissection</h2>" << dissection_section(ws, dg);

    h << "<h2>Ablation</h2>";
    {
        const auto& pc = causal.at("per_class");
        std::vector<std::vector<std::string>> rows;
        for (const auto& c : pc)
            rows.push_back({c.at("name").get<std::string>(), fmt(c.at("baseline").get<double>()),
                            fmt(c.at("accuracy_top_removed").get<double>()),
                            fmt(c.at("accuracy_random_removed").get<double>()),
                            fmt(c.at("accuracy_top_set_removed").get<double>()),
                            fmt(c.at("all_class_top_set_removed").get<double>())});
        const std::string top = std::to_string(causal.at("top_units").get<int>());
        const std::string set = std::to_string(causal.at("top_set").get<int>());
        h << "<p>Layer " << escape(causal.at("layer").get<std::string>()) << ". Accuracy drop of the top " << top
          << " units minus that of " << top << " random units: " << interval_text(causal.at("top_minus_random"))
          << ".</p>"
          << table({"class", "baseline", "top " + top + " removed", "random " + top + " removed",
                    "top " + set + " removed", "all-class, top " + set + " removed"},
                   rows);
        std::vector<std::pair<double, double>> removed, kept;
        std::map<int, std::pair<double, double>> mean;
        for (const auto& c : curves.at("curves"))
            for (const auto& p : c.at("points")) {
                auto& m = mean[p.at("k").get<int>()];
                m.first += p.at("accuracy_removed").get<double>();
                m.second += p.at("accuracy_kept").get<double>();
            }
        const double n = static_cast<double>(curves.at("curves").size());
        for (const auto& [k, m] : mean) {
            removed.emplace_back(k, m.first / n);
            kept.emplace_back(k, m.second / n);
        }
        h << line_chart({{"top-k removed", "#c0392b", removed}, {"only top-k kept", "#27ae60", kept}}, "k",
                        "balanced accuracy (mean over classes)");
    }

    h << "<h2>Generator interventions</h2>";
    {
        const auto& t = gsum.at("top_removal");
        const auto& r = gsum.at("random_removal");
        h << "<p>Dominant object: " << escape(gsum.at("dominant_name").get<std::string>()) << ". Removing its top "
          << t.at("units").size() << " units cuts its pixels by " << fmt(100.0 * t.at("reduction").get<double>(), 1)
          << "%; " << r.at("units").size() << " random units cut them by "
          << fmt(100.0 * r.at("reduction").get<double>(), 1) << "%.</p>"
          << img_tag(ws, "intervene/removal_pairs.png", "removal pairs");
        h << "<p>Context map (mean new pixels when forcing the units at each location): variance "
          << fmt(ctx.at("variance").get<double>(), 2) << ", permutation null 95th percentile "
          << fmt(ctx.at("null_p95").get<double>(), 2) << ", p = " << fmt(ctx.at("p_value").get<double>(), 4)
          << ".</p>" << img_tag(ws, "intervene/context_map.png", "context map");
    }

    h << "<h2>Adversarial attacks</h2><p>" << atk.at("successes").get<int>() << " of " << atk.at("images").get<int>()
      << " targeted attacks succeeded within an L-infinity bound of " << fmt(atk.at("linf_bound").get<double>(), 4)
      << " (mean L2 " << fmt(atk.at("mean_l2").get<double>()) << ").</p>";
    {
        const auto& imp = atk.at("importance");
        std::vector<std::pair<std::string, double>> bars;
        double vmax = 0.0;
        for (const auto& b : imp.at("buckets")) {
            bars.emplace_back(b.at("name").get<std::string>(), b.at("interval").at("mean").get<double>());
            vmax = std::max(vmax, bars.back().second);
        }
        bars.emplace_back("random", imp.at("random").at("interval").at("mean").get<double>());
        vmax = std::max(vmax, bars.back().second);
        h << "<p>Mean |change in peak activation| by importance rank. Top minus random: "
          << interval_text(imp.at("top_minus_random").at("interval")) << ".</p>" << bar_chart(bars, vmax);
        for (const auto& a : attacks.at("attacks"))
            if (a.contains("triptych"))
                h << "<figure>" << img_tag(ws, a.at("triptych").get<std::string>(), "attack") << "<figcaption>"
                  << a.at("source").get<int>() << " &rarr; " << a.at("target").get<int>() << "</figcaption></figure>";
    }
    h << "</body></html>\n";
    std::filesystem::create_directories(ws.path("report"));
    write_text(ws.path("report/index.html"), h.str());
}

} // namespace unitscope
