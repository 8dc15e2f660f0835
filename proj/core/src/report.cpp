#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

#include <json.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "wepe/error.hpp"
#include "wepe/evaluation.hpp"

namespace wepe {
namespace {

using ojson = nlohmann::ordered_json;

// JSON has no infinities; thresholds at the sentinels are written as strings.
ojson number(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  if (std::isnan(v)) return "nan";
  return v;
}

double from_number(const nlohmann::json& j) {
  if (j.is_string()) {
    const auto s = j.get<std::string>();
    if (s == "inf") return std::numeric_limits<double>::infinity();
    if (s == "-inf") return -std::numeric_limits<double>::infinity();
    return std::numeric_limits<double>::quiet_NaN();
  }
  return j.get<double>();
}

ojson metric_json(const MetricSet& m) {
  return {{"auroc", m.auroc}, {"ap", m.ap}, {"acc", m.acc}, {"threshold", number(m.threshold)}};
}

MetricSet metric_from(const nlohmann::json& j) {
  return {j.at("auroc").get<double>(), j.at("ap").get<double>(), j.at("acc").get<double>(), from_number(j.at("threshold"))};
}

std::string fmt(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

}  // namespace

std::string report_to_json(const EvalReport& r) {
  ojson j;
  j["schema"] = r.schema;
  j["spec"] = r.spec_json.empty() ? ojson::object() : ojson::parse(r.spec_json);
  j["spec_hash"] = r.spec_hash;
  j["arch_id"] = r.arch_id;
  j["manifest"] = r.manifest_name;
  j["degradation"] = r.degradation ? ojson(*r.degradation) : ojson(nullptr);
  j["seeds"] = r.seeds;
  j["n_images"] = r.n_images;
  ojson overall = ojson::object();
  for (const auto& [k, s] : r.overall) {
    overall[k] = number(s.mean);
    overall[k + "_std"] = s.std;
  }
  j["overall"] = overall;
  ojson per_gen = ojson::object();
  for (const auto& [gen, metrics] : r.per_generator) {
    ojson g = ojson::object();
    for (const auto& [k, s] : metrics) {
      g[k] = s.mean;
      g[k + "_std"] = s.std;
    }
    per_gen[gen] = g;
  }
  j["per_generator"] = per_gen;
  ojson seeds = ojson::array();
  for (const auto& s : r.per_seed) {
    ojson item;
    item["seed"] = s.seed;
    item["overall"] = metric_json(s.overall);
    ojson g = ojson::object();
    for (const auto& [gen, m] : s.per_generator) g[gen] = metric_json(m);
    item["per_generator"] = g;
    seeds.push_back(item);
  }
  j["per_seed"] = seeds;
  ojson errors = ojson::array();
  for (const auto& [path, msg] : r.errors) errors.push_back({{"path", path}, {"message", msg}});
  j["errors"] = errors;
  j["timestamps"] = {{"started", r.started_at}, {"finished", r.finished_at}};
  return j.dump(2);
}

EvalReport report_from_json(std::string_view text) {
  EvalReport r;
  try {
    const auto j = ojson::parse(text);
    r.schema = j.at("schema").get<int>();
    if (r.schema != 1) throw ValidationError("unsupported report schema " + std::to_string(r.schema));
    r.spec_json = j.at("spec").empty() ? std::string() : j.at("spec").dump();
    r.spec_hash = j.value("spec_hash", "");
    r.arch_id = j.value("arch_id", "");
    r.manifest_name = j.value("manifest", "");
    if (j.contains("degradation") && !j["degradation"].is_null()) r.degradation = j["degradation"].get<std::string>();
    r.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
    r.n_images = j.value("n_images", std::size_t{0});
    for (auto it = j.at("overall").begin(); it != j.at("overall").end(); ++it) {
      const std::string& k = it.key();
      if (k.ends_with("_std")) continue;
      r.overall[k] = {from_number(*it), j["overall"].value(k + "_std", 0.0)};
    }
    for (auto g = j.at("per_generator").begin(); g != j.at("per_generator").end(); ++g)
      for (auto it = g->begin(); it != g->end(); ++it) {
        if (it.key().ends_with("_std")) continue;
        r.per_generator[g.key()][it.key()] = {it->get<double>(), g->value(it.key() + "_std", 0.0)};
      }
    for (const auto& s : j.at("per_seed")) {
      SeedResult sr;
      sr.seed = s.at("seed").get<std::uint64_t>();
      sr.overall = metric_from(s.at("overall"));
      for (auto it = s.at("per_generator").begin(); it != s.at("per_generator").end(); ++it)
        sr.per_generator[it.key()] = metric_from(*it);
      r.per_seed.push_back(std::move(sr));
    }
    for (const auto& e : j.at("errors")) r.errors.emplace_back(e.at("path").get<std::string>(), e.at("message").get<std::string>());
    if (j.contains("timestamps")) {
      r.started_at = j["timestamps"].value("started", "");
      r.finished_at = j["timestamps"].value("finished", "");
    }
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("invalid report JSON: ") + e.what());
  }
  return r;
}

std::string report_to_csv(const EvalReport& r) {
  std::ostringstream os;
  os << "generator,seed,auroc,ap,acc,threshold\n";
  for (const auto& s : r.per_seed) {
    os << "all," << s.seed << ',' << fmt(s.overall.auroc) << ',' << fmt(s.overall.ap) << ',' << fmt(s.overall.acc) << ','
       << fmt(s.overall.threshold) << '\n';
    for (const auto& [gen, m] : s.per_generator)
      os << gen << ',' << s.seed << ',' << fmt(m.auroc) << ',' << fmt(m.ap) << ',' << fmt(m.acc) << ','
         << fmt(m.threshold) << '\n';
  }
  return os.str();
}

namespace {

constexpr int kWidth = 640;
constexpr int kHeight = 400;
constexpr int kMargin = 50;

cv::Mat canvas(const std::string& title) {
  cv::Mat img(kHeight, kWidth, CV_8UC3, cv::Scalar(255, 255, 255));
  cv::putText(img, title, {kMargin, 30}, cv::FONT_HERSHEY_SIMPLEX, 0.6, {0, 0, 0}, 1, cv::LINE_AA);
  cv::line(img, {kMargin, kHeight - kMargin}, {kWidth - kMargin / 2, kHeight - kMargin}, {0, 0, 0});
  cv::line(img, {kMargin, kHeight - kMargin}, {kMargin, kMargin}, {0, 0, 0});
  return img;
}

void save_png(const std::filesystem::path& path, const cv::Mat& img) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  if (!cv::imwrite(path.string(), img)) throw RuntimeFailure("cannot write plot: " + path.string());
}

void axis_labels(cv::Mat& img, double lo, double hi) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.4g", lo);
  cv::putText(img, buf, {kMargin - 10, kHeight - kMargin + 18}, cv::FONT_HERSHEY_SIMPLEX, 0.4, {0, 0, 0}, 1, cv::LINE_AA);
  std::snprintf(buf, sizeof(buf), "%.4g", hi);
  cv::putText(img, buf, {kWidth - kMargin - 30, kHeight - kMargin + 18}, cv::FONT_HERSHEY_SIMPLEX, 0.4, {0, 0, 0}, 1,
              cv::LINE_AA);
}

}  // namespace

void plot_histograms(const std::filesystem::path& path, std::span<const double> natural,
                     std::span<const double> generated, const std::string& title) {
  constexpr int kBins = 30;
  double lo = std::numeric_limits<double>::infinity();
  double hi = -lo;
  for (double v : natural) lo = std::min(lo, v), hi = std::max(hi, v);
  for (double v : generated) lo = std::min(lo, v), hi = std::max(hi, v);
  if (!std::isfinite(lo)) lo = 0.0, hi = 1.0;
  if (hi <= lo) hi = lo + 1e-9;
  auto histogram = [&](std::span<const double> xs) {
    std::vector<double> h(kBins, 0.0);
    for (double v : xs) h[std::min(kBins - 1, static_cast<int>((v - lo) / (hi - lo) * kBins))] += 1.0;
    for (double& c : h) c /= std::max<std::size_t>(xs.size(), 1);
    return h;
  };
  const auto hn = histogram(natural);
  const auto hg = histogram(generated);
  const double top = std::max(*std::max_element(hn.begin(), hn.end()), *std::max_element(hg.begin(), hg.end()));

  cv::Mat img = canvas(title);
  const double bw = static_cast<double>(kWidth - kMargin - kMargin / 2) / kBins;
  const double plot_h = kHeight - 2 * kMargin;
  for (int b = 0; b < kBins; ++b) {
    const int x0 = kMargin + static_cast<int>(b * bw);
    const int x1 = kMargin + static_cast<int>((b + 1) * bw) - 1;
    const int yn = kHeight - kMargin - static_cast<int>(hn[b] / top * plot_h);
    const int yg = kHeight - kMargin - static_cast<int>(hg[b] / top * plot_h);
    cv::rectangle(img, {x0, yn}, {x0 + (x1 - x0) / 2, kHeight - kMargin}, {200, 120, 40}, cv::FILLED);
    cv::rectangle(img, {x0 + (x1 - x0) / 2, yg}, {x1, kHeight - kMargin}, {40, 80, 220}, cv::FILLED);
  }
  cv::putText(img, "natural", {kWidth - 150, 30}, cv::FONT_HERSHEY_SIMPLEX, 0.45, {200, 120, 40}, 1, cv::LINE_AA);
  cv::putText(img, "generated", {kWidth - 150, 48}, cv::FONT_HERSHEY_SIMPLEX, 0.45, {40, 80, 220}, 1, cv::LINE_AA);
  axis_labels(img, lo, hi);
  save_png(path, img);
}

void plot_curve(const std::filesystem::path& path, std::span<const double> xs, std::span<const double> ys,
                const std::string& title) {
  if (xs.size() != ys.size() || xs.empty()) throw ValidationError("plot_curve: bad series");
  const auto [xlo, xhi] = std::minmax_element(xs.begin(), xs.end());
  const auto [ylo, yhi] = std::minmax_element(ys.begin(), ys.end());
  const double xr = std::max(*xhi - *xlo, 1e-12);
  const double y0 = std::min(*ylo, 0.5);
  const double yr = std::max(std::max(*yhi, 1.0) - y0, 1e-12);
  cv::Mat img = canvas(title);
  const double pw = kWidth - kMargin - kMargin / 2;
  const double ph = kHeight - 2 * kMargin;
  std::vector<cv::Point> pts;
  for (std::size_t i = 0; i < xs.size(); ++i)
    pts.emplace_back(kMargin + static_cast<int>((xs[i] - *xlo) / xr * pw),
                     kHeight - kMargin - static_cast<int>((ys[i] - y0) / yr * ph));
  cv::polylines(img, pts, false, {40, 80, 220}, 2, cv::LINE_AA);
  for (const auto& p : pts) cv::circle(img, p, 3, {0, 0, 0}, cv::FILLED);
  axis_labels(img, *xlo, *xhi);
  save_png(path, img);
}

void plot_bars(const std::filesystem::path& path, std::span<const double> values, const std::string& title) {
  if (values.empty()) throw ValidationError("plot_bars: no values");
  const auto [lo_it, hi_it] = std::minmax_element(values.begin(), values.end());
  const double lo = std::min(0.0, *lo_it);
  const double hi = std::max(*hi_it, lo + 1e-12);
  cv::Mat img = canvas(title);
  const double bw = static_cast<double>(kWidth - kMargin - kMargin / 2) / values.size();
  const double ph = kHeight - 2 * kMargin;
  for (std::size_t i = 0; i < values.size(); ++i) {
    const int x0 = kMargin + static_cast<int>(i * bw) + 1;
    const int x1 = kMargin + static_cast<int>((i + 1) * bw) - 1;
    const int y = kHeight - kMargin - static_cast<int>((values[i] - lo) / (hi - lo) * ph);
    cv::rectangle(img, {x0, y}, {x1, kHeight - kMargin}, {200, 120, 40}, cv::FILLED);
  }
  save_png(path, img);
}

std::vector<std::filesystem::path> emit_report(const EvalReport& report, const std::filesystem::path& out_dir,
                                               ReportFormat format, bool plots) {
  std::filesystem::create_directories(out_dir);
  std::vector<std::filesystem::path> written;
  const auto path = out_dir / (format == ReportFormat::json ? "report.json" : "report.csv");
  {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw RuntimeFailure("cannot write report: " + path.string());
    out << (format == ReportFormat::json ? report_to_json(report) + "\n" : report_to_csv(report));
    if (!out) throw RuntimeFailure("failed writing report: " + path.string());
  }
  written.push_back(path);

  if (plots) {
    std::vector<double> natural;
    std::map<std::string, std::vector<double>> generated;
    for (const auto& s : report.first_seed_scores) {
      if (s.label == 1) {
        natural.push_back(s.mean_similarity);
      } else {
        generated[s.generator].push_back(s.mean_similarity);
      }
    }
    for (const auto& [gen, scores] : generated) {
      const auto p = out_dir / ("hist_" + gen + ".png");
      plot_histograms(p, natural, scores, "similarity: natural vs " + gen);
      written.push_back(p);
    }
  }
  return written;
}

}  // namespace wepe
