#include "gren/evalkit.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

using nlohmann::json;

namespace gren {

std::vector<std::uint8_t> grid_to_region(const std::vector<double>& prob_grid,
                                         std::size_t grid, std::size_t cell_px,
                                         double threshold) {
    if (prob_grid.size() != grid * grid) {
        throw std::invalid_argument("grid_to_region: prob grid size mismatch");
    }
    if (!(threshold > 0.0 && threshold < 1.0)) {
        throw std::invalid_argument("grid_to_region: threshold must be in (0,1)");
    }
    const std::size_t side = grid * cell_px;
    std::vector<std::uint8_t> mask(side * side, 0);
    for (std::size_t jr = 0; jr < grid; ++jr) {
        for (std::size_t jc = 0; jc < grid; ++jc) {
            if (!(prob_grid[jr * grid + jc] > threshold)) continue;
            for (std::size_t y = jr * cell_px; y < (jr + 1) * cell_px; ++y) {
                std::fill_n(mask.begin() + static_cast<std::ptrdiff_t>(y * side + jc * cell_px),
                            cell_px, std::uint8_t{1});
            }
        }
    }
    return mask;
}

std::vector<std::uint8_t> rasterize_boxes(const std::vector<Box>& boxes, std::size_t side) {
    std::vector<std::uint8_t> mask(side * side, 0);
    for (const Box& b : boxes) {
        if (b.x1 >= side || b.y1 >= side || b.x0 > b.x1 || b.y0 > b.y1) {
            throw std::invalid_argument("rasterize_boxes: box outside image");
        }
        for (std::size_t y = b.y0; y <= b.y1; ++y) {
            std::fill_n(mask.begin() + static_cast<std::ptrdiff_t>(y * side + b.x0),
                        b.x1 - b.x0 + 1, std::uint8_t{1});
        }
    }
    return mask;
}

double mask_iou(const std::vector<std::uint8_t>& a, const std::vector<std::uint8_t>& b) {
    if (a.size() != b.size()) throw std::invalid_argument("mask_iou: mask sizes differ");
    std::size_t inter = 0, uni = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const bool pa = a[i] != 0, pb = b[i] != 0;
        inter += pa && pb;
        uni += pa || pb;
    }
    if (uni == 0) throw std::domain_error("no instance");
    return static_cast<double>(inter) / static_cast<double>(uni);
}

AccuracySummary localization_accuracy(const std::vector<LocalizationResult>& results,
                                      const std::vector<double>& thresholds) {
    std::map<std::size_t, std::vector<const LocalizationResult*>> by_class;
    for (const LocalizationResult& r : results) by_class[r.cls].push_back(&r);
    AccuracySummary s;
    s.mean.assign(thresholds.size(), 0.0);
    for (const auto& [cls, rs] : by_class) {
        s.classes.push_back(cls);
        std::vector<double> acc(thresholds.size());
        for (std::size_t t = 0; t < thresholds.size(); ++t) {
            std::size_t correct = 0;
            for (const LocalizationResult* r : rs) correct += r->correct_at(thresholds[t]);
            acc[t] = static_cast<double>(correct) / static_cast<double>(rs.size());
            s.mean[t] += acc[t];
        }
        s.per_class.push_back(std::move(acc));
    }
    if (!by_class.empty()) {
        for (double& m : s.mean) m /= static_cast<double>(by_class.size());
    }
    return s;
}

double image_score(const std::vector<double>& prob_grid, double prob_clamp) {
    double s = 0.0;
    for (double p : prob_grid) {
        p = std::clamp(p, prob_clamp, 1.0 - prob_clamp);
        s += std::log1p(-p);
    }
    return -std::expm1(s);
}

double auc(const std::vector<double>& scores, const std::vector<int>& labels) {
    if (scores.size() != labels.size()) {
        throw std::invalid_argument("auc: scores and labels differ in length");
    }
    std::size_t pos = 0, neg = 0;
    for (int y : labels) {
        if (y != 0 && y != 1) throw std::invalid_argument("auc: labels must be 0 or 1");
        (y == 1 ? pos : neg) += 1;
    }
    if (pos == 0 || neg == 0) throw std::invalid_argument("auc: degenerate label set");

    std::vector<std::size_t> idx(scores.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(),
              [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

    // Sum of positive midranks; halves are exact in binary so the Mann-Whitney
    // count (concordant + ties/2) is reproduced bit for bit.
    double rank_pos = 0.0;
    std::size_t i = 0;
    while (i < idx.size()) {
        std::size_t j = i;
        while (j + 1 < idx.size() && scores[idx[j + 1]] == scores[idx[i]]) ++j;
        const double midrank = 0.5 * static_cast<double>(i + j) + 1.0;
        for (std::size_t t = i; t <= j; ++t) {
            if (labels[idx[t]] == 1) rank_pos += midrank;
        }
        i = j + 1;
    }
    const double p = static_cast<double>(pos);
    return (rank_pos - p * (p + 1.0) / 2.0) / (p * static_cast<double>(neg));
}

MetricsReport evaluate(const BackboneParams& params, const std::vector<Sample>& samples,
                       const std::vector<double>& iou_thresholds, double grid_threshold,
                       double prob_clamp) {
    if (samples.empty()) throw std::invalid_argument("evaluate: empty evaluation split");
    const std::size_t K = params.config.num_classes;
    const std::size_t grid = params.config.grid();
    const std::size_t cell = params.config.cell_px();
    const std::size_t side = params.config.image_side;

    std::vector<std::vector<double>> scores(K);
    std::vector<std::vector<int>> labels(K);
    std::vector<LocalizationResult> loc;
    for (const Sample& s : samples) {
        ModelOutput out = forward(params, s.image);
        const auto probs = out.probs.data();
        for (std::size_t k = 0; k < K; ++k) {
            std::vector<double> pg(probs.begin() + static_cast<std::ptrdiff_t>(k * grid * grid),
                                   probs.begin() + static_cast<std::ptrdiff_t>((k + 1) * grid * grid));
            scores[k].push_back(image_score(pg, prob_clamp));
            labels[k].push_back(s.labels.at(k));
            std::vector<Box> gt;
            for (const Box& b : s.boxes) {
                if (b.cls == k) gt.push_back(b);
            }
            if (gt.empty()) continue;
            const double iou = mask_iou(grid_to_region(pg, grid, cell, grid_threshold),
                                        rasterize_boxes(gt, side));
            loc.push_back({s.id, k, iou});
        }
    }
    if (loc.empty()) throw std::invalid_argument("evaluate: split has no boxes");

    const AccuracySummary summary = localization_accuracy(loc, iou_thresholds);
    MetricsReport rep;
    rep.num_samples = samples.size();
    rep.iou_thresholds = iou_thresholds;
    rep.grid_threshold = grid_threshold;
    rep.mean_loc_acc = summary.mean;
    double auc_sum = 0.0;
    std::size_t auc_n = 0;
    for (std::size_t k = 0; k < K; ++k) {
        ClassMetrics m;
        m.cls = k;
        for (std::size_t i = 0; i < summary.classes.size(); ++i) {
            if (summary.classes[i] == k) {
                m.loc_acc = summary.per_class[i];
                break;
            }
        }
        for (const LocalizationResult& r : loc) m.annotated += r.cls == k;
        for (int y : labels[k]) (y == 1 ? m.positives : m.negatives) += 1;
        if (m.positives > 0 && m.negatives > 0) {
            m.auc = auc(scores[k], labels[k]);
            auc_sum += *m.auc;
            ++auc_n;
        }
        rep.per_class.push_back(std::move(m));
    }
    if (auc_n > 0) rep.mean_auc = auc_sum / static_cast<double>(auc_n);
    return rep;
}

// ---- report serialization --------------------------------------------------

void write_report_json(const MetricsReport& r, const std::string& path) {
    json per_class = json::array();
    for (const ClassMetrics& m : r.per_class) {
        json e{{"class", m.cls},
               {"annotated", m.annotated},
               {"positives", m.positives},
               {"negatives", m.negatives},
               {"loc_acc", m.loc_acc}};
        e["auc"] = m.auc ? json(*m.auc) : json(nullptr);
        per_class.push_back(std::move(e));
    }
    json root{{"num_samples", r.num_samples},
              {"iou_thresholds", r.iou_thresholds},
              {"grid_threshold", r.grid_threshold},
              {"per_class", per_class},
              {"mean_loc_acc", r.mean_loc_acc}};
    root["mean_auc"] = r.mean_auc ? json(*r.mean_auc) : json(nullptr);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("write_report_json: cannot open " + path);
    out << root.dump(2) << "\n";
    if (!out) throw std::runtime_error("write_report_json: write failed for " + path);
}

MetricsReport read_report_json(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("read_report_json: cannot open " + path);
    json root;
    try {
        in >> root;
        MetricsReport r;
        r.num_samples = root.at("num_samples").get<std::size_t>();
        r.iou_thresholds = root.at("iou_thresholds").get<std::vector<double>>();
        r.grid_threshold = root.at("grid_threshold").get<double>();
        for (const json& e : root.at("per_class")) {
            ClassMetrics m;
            m.cls = e.at("class").get<std::size_t>();
            m.annotated = e.at("annotated").get<std::size_t>();
            m.positives = e.at("positives").get<std::size_t>();
            m.negatives = e.at("negatives").get<std::size_t>();
            m.loc_acc = e.at("loc_acc").get<std::vector<double>>();
            if (!e.at("auc").is_null()) m.auc = e.at("auc").get<double>();
            r.per_class.push_back(std::move(m));
        }
        r.mean_loc_acc = root.at("mean_loc_acc").get<std::vector<double>>();
        if (!root.at("mean_auc").is_null()) r.mean_auc = root.at("mean_auc").get<double>();
        return r;
    } catch (const json::exception& e) {
        throw std::runtime_error("read_report_json: malformed report " + path + ": " + e.what());
    }
}

namespace {

// Shortest decimal form that parses back to the same double.
std::string fmt(double v) { return json(v).dump(); }

double parse_double(const std::string& s) { return json::parse(s).get<double>(); }

std::vector<std::string> split_csv(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : line) {
        if (c == ',') {
            out.push_back(cur);
            cur.clear();
        } else {
            cur.push_back(c);
        }
    }
    out.push_back(cur);
    return out;
}

}  // namespace

void write_report_csv(const MetricsReport& r, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("write_report_csv: cannot open " + path);
    out << "#num_samples=" << r.num_samples << "\n";
    out << "#grid_threshold=" << fmt(r.grid_threshold) << "\n";
    out << "#iou_thresholds=";
    for (std::size_t i = 0; i < r.iou_thresholds.size(); ++i) {
        out << (i ? ";" : "") << fmt(r.iou_thresholds[i]);
    }
    out << "\n";
    out << "class,metric,threshold,value,annotated,positives,negatives\n";
    for (const ClassMetrics& m : r.per_class) {
        const std::string counts = "," + std::to_string(m.annotated) + "," +
                                   std::to_string(m.positives) + "," + std::to_string(m.negatives);
        for (std::size_t t = 0; t < m.loc_acc.size(); ++t) {
            out << m.cls << ",loc_acc," << fmt(r.iou_thresholds[t]) << "," << fmt(m.loc_acc[t])
                << counts << "\n";
        }
        out << m.cls << ",auc,," << (m.auc ? fmt(*m.auc) : "") << counts << "\n";
    }
    for (std::size_t t = 0; t < r.mean_loc_acc.size(); ++t) {
        out << "mean,loc_acc," << fmt(r.iou_thresholds[t]) << "," << fmt(r.mean_loc_acc[t])
            << ",,,\n";
    }
    out << "mean,auc,," << (r.mean_auc ? fmt(*r.mean_auc) : "") << ",,,\n";
    if (!out) throw std::runtime_error("write_report_csv: write failed for " + path);
}

MetricsReport read_report_csv(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("read_report_csv: cannot open " + path);
    MetricsReport r;
    std::map<std::size_t, ClassMetrics> classes;
    std::string line;
    bool saw_header = false;
    try {
        while (std::getline(in, line)) {
            if (line.empty()) continue;
            if (line[0] == '#') {
                const auto eq = line.find('=');
                if (eq == std::string::npos) throw std::runtime_error("metadata line without '='");
                const std::string key = line.substr(1, eq - 1), val = line.substr(eq + 1);
                if (key == "num_samples") {
                    r.num_samples = std::stoull(val);
                } else if (key == "grid_threshold") {
                    r.grid_threshold = parse_double(val);
                } else if (key == "iou_thresholds") {
                    std::stringstream ss(val);
                    std::string tok;
                    while (std::getline(ss, tok, ';')) r.iou_thresholds.push_back(parse_double(tok));
                } else {
                    throw std::runtime_error("unknown metadata key " + key);
                }
                continue;
            }
            if (!saw_header) {  // column header row
                saw_header = true;
                continue;
            }
            const auto f = split_csv(line);
            if (f.size() != 7) throw std::runtime_error("expected 7 fields, got " + std::to_string(f.size()));
            if (f[0] == "mean") {
                if (f[1] == "loc_acc") r.mean_loc_acc.push_back(parse_double(f[3]));
                else if (!f[3].empty()) r.mean_auc = parse_double(f[3]);
                continue;
            }
            ClassMetrics& m = classes[std::stoull(f[0])];
            m.cls = std::stoull(f[0]);
            m.annotated = std::stoull(f[4]);
            m.positives = std::stoull(f[5]);
            m.negatives = std::stoull(f[6]);
            if (f[1] == "loc_acc") m.loc_acc.push_back(parse_double(f[3]));
            else if (f[1] == "auc" && !f[3].empty()) m.auc = parse_double(f[3]);
        }
    } catch (const std::exception& e) {
        throw std::runtime_error("read_report_csv: malformed report " + path + ": " + e.what());
    }
    for (auto& [cls, m] : classes) r.per_class.push_back(std::move(m));
    return r;
}

std::string format_report_table(const MetricsReport& r) {
    std::ostringstream out;
    char buf[64];
    auto num = [&](double v) {
        std::snprintf(buf, sizeof(buf), "%10.4f", v);
        return std::string(buf);
    };
    out << "class  annotated   pos   neg";
    for (double t : r.iou_thresholds) {
        std::snprintf(buf, sizeof(buf), "%10s", ("acc@" + fmt(t)).c_str());
        out << buf;
    }
    out << "       auc\n";
    for (const ClassMetrics& m : r.per_class) {
        std::snprintf(buf, sizeof(buf), "%-5zu  %9zu  %4zu  %4zu", m.cls, m.annotated,
                      m.positives, m.negatives);
        out << buf;
        for (std::size_t t = 0; t < r.iou_thresholds.size(); ++t) {
            out << (t < m.loc_acc.size() ? num(m.loc_acc[t]) : std::string("         -"));
        }
        out << (m.auc ? num(*m.auc) : std::string("         -")) << "\n";
    }
    out << "mean                        ";
    for (double v : r.mean_loc_acc) out << num(v);
    out << (r.mean_auc ? num(*r.mean_auc) : std::string("         -")) << "\n";
    out << "(" << r.num_samples << " samples, grid threshold " << fmt(r.grid_threshold) << ")\n";
    return out.str();
}

}  // namespace gren
