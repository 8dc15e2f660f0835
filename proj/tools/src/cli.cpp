#include "wepe/cli.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <numeric>
#include <random>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "wepe/backbone.hpp"
#include "wepe/calibration.hpp"
#include "wepe/data.hpp"
#include "wepe/error.hpp"
#include "wepe/evaluation.hpp"
#include "wepe/probe.hpp"
#include "wepe/rng.hpp"
#include "wepe/scoring.hpp"
#include "wepe/theory.hpp"
#include "wepe/toy.hpp"
#include "wepe/transforms.hpp"

namespace wepe::cli {
namespace {

namespace fs = std::filesystem;
using Config = nlohmann::ordered_json;

// ---------------------------------------------------------------------------
// Shared helpers

std::string absolute(const std::string& path) { return path.empty() ? path : fs::absolute(path).lexically_normal().string(); }

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc | std::ios::binary);
  if (!out) throw RuntimeFailure("cannot write " + path.string());
  out << text;
  if (!out) throw RuntimeFailure("failed writing " + path.string());
}

std::string read_text(const fs::path& path) {
  if (!fs::exists(path)) throw MissingFileError(path.string());
  std::ifstream in(path, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<std::uint64_t> parse_seeds(const std::string& text) {
  std::vector<std::uint64_t> seeds;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) throw ValidationError("empty entry in seed list '" + text + "'");
    std::size_t used = 0;
    std::uint64_t v = 0;
    try {
      v = std::stoull(item, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != item.size()) throw ValidationError("invalid seed '" + item + "'");
    seeds.push_back(v);
  }
  if (seeds.empty()) throw ValidationError("seed list is empty");
  return seeds;
}

Backbone load_model(const Config& model) {
  const std::string arch_id = model.at("arch_id").get<std::string>();
  Backbone backbone = model.at("checkpoint").is_null()
                          ? make_reference_backbone(model.at("reference_seed").get<std::uint64_t>(), arch_id)
                          : load_backbone(model.at("checkpoint").get<std::string>(), arch_id);
  if (!model.at("calibration").is_null()) {
    const auto ckpt = CalibrationCheckpoint::load(model.at("calibration").get<std::string>());
    if (ckpt.arch_id != backbone.arch_id())
      throw ValidationError("calibration checkpoint was trained for " + ckpt.arch_id + ", not " + backbone.arch_id());
    backbone = merge_adapters(backbone, ckpt.adapters);
  }
  return backbone;
}

PerturbationSpec spec_from(const Config& cfg) { return PerturbationSpec::from_json(cfg.at("spec").dump()); }

std::optional<DegradationSpec> degradation_from(const Config& options) {
  if (!options.contains("degrade") || options["degrade"].is_null()) return std::nullopt;
  return DegradationSpec::parse(options["degrade"].get<std::string>());
}

// ---------------------------------------------------------------------------
// Flag groups shared by several subcommands

struct ModelFlags {
  std::string arch = "ref-tiny";
  std::string checkpoint;
  std::uint64_t reference_seed = 0;
  std::string calibration;

  void add(CLI::App* app, bool with_calibration = true) {
    app->add_option("--arch", arch, "Architecture id (ref-tiny, vit-s-14, vit-b-14, vit-l-14)");
    app->add_option("--checkpoint", checkpoint, "Backbone checkpoint; omitted means a seeded random reference model");
    app->add_option("--model-seed", reference_seed, "Seed of the reference model when no checkpoint is given");
    if (with_calibration) app->add_option("--calibration", calibration, "Adapter checkpoint from `wepe calibrate`");
  }

  Config resolve() const {
    find_arch(arch);
    if (!checkpoint.empty() && !fs::exists(checkpoint)) throw MissingFileError(checkpoint);
    if (!calibration.empty() && !fs::exists(calibration)) throw MissingFileError(calibration);
    Config m;
    m["arch_id"] = arch;
    m["checkpoint"] = checkpoint.empty() ? Config(nullptr) : Config(absolute(checkpoint));
    m["reference_seed"] = reference_seed;
    m["calibration"] = calibration.empty() ? Config(nullptr) : Config(absolute(calibration));
    return m;
  }
};

struct SpecFlags {
  std::string family = "gaussian";
  double ratio = 0.1;
  std::string blocks = "default";
  int n_draws = 1;
  double dropout_p = 0.1;

  void add(CLI::App* app) {
    app->add_option("--family", family, "Noise family: gaussian, uniform, laplace or mc_dropout");
    app->add_option("--ratio", ratio, "Noise std as a fraction of each block's mean |parameter|");
    app->add_option("--blocks", blocks, "Blocks to perturb: first:K, 0,3,5, 0-18 or default");
    app->add_option("--n-draws", n_draws, "Independent perturbation draws per image");
    app->add_option("--dropout-p", dropout_p, "Drop probability for --family mc_dropout");
  }

  Config resolve(const ArchSpec& arch, std::uint64_t seed) const {
    PerturbationSpec spec;
    spec.family = parse_noise_family(family);
    spec.ratio = ratio;
    const auto depth = static_cast<std::size_t>(arch.depth);
    spec.block_indices = blocks == "default" ? default_blocks(depth) : parse_block_selection(blocks, depth);
    spec.n_draws = n_draws;
    spec.seed = seed;
    spec.dropout_p = dropout_p;
    spec.validate(depth);
    return Config::parse(spec.to_json());
  }
};

struct OutputFlags {
  std::string output = "wepe-out";
  int workers = 1;
  std::string format = "json";
  bool plots = false;

  void add(CLI::App* app, bool with_format = false) {
    app->add_option("--output,-o", output, "Output directory");
    app->add_option("--workers", workers, "Worker threads for image scoring")->check(CLI::PositiveNumber);
    if (with_format) app->add_option("--format", format, "Report format: json or csv");
    app->add_flag("--plots", plots, "Also write PNG plots");
  }

  void fill(Config& cfg) const {
    if (format != "json" && format != "csv") throw ValidationError("--format must be json or csv");
    cfg["output"] = absolute(output);
    cfg["workers"] = workers;
    cfg["format"] = format;
    cfg["plots"] = plots;
  }
};

// ---------------------------------------------------------------------------
// Command execution from a resolved config

struct Context {
  const Config& cfg;
  fs::path out_dir;
  std::ostream& out;
  int workers() const { return cfg.at("workers").get<int>(); }
};

std::string score_line(const ScoreRecord& r, int label, const std::string& generator) {
  Config j;
  j["image_id"] = r.image_id;
  j["label"] = label;
  j["generator"] = generator.empty() ? Config(nullptr) : Config(generator);
  j["mean_similarity"] = r.mean_similarity;
  j["uncertainty"] = r.uncertainty;
  j["n_draws"] = r.n_draws;
  j["spec_hash"] = r.spec_hash;
  return j.dump();
}

void run_score(const Context& ctx) {
  const Config& opt = ctx.cfg.at("options");
  const auto model = std::make_shared<const Backbone>(load_model(ctx.cfg.at("model")));
  const PerturbationSpec spec = spec_from(ctx.cfg);
  LoadedDataset data = load_dataset(load_manifest(ctx.cfg.at("manifest").get<std::string>()), model->arch());
  if (const auto deg = degradation_from(opt)) data = degrade_dataset(data, *deg, model->arch(), opt.at("degrade_seed"));
  if (data.size() == 0) throw ValidationError("no decodable images in the manifest");

  WepeScorer scorer(model, spec, ctx.workers());
  std::vector<FeatureVector> clean;
  if (opt.at("feature_cache").is_null()) {
    clean = scorer.clean_features(data.inputs);
  } else {
    FeatureCache cache(opt.at("feature_cache").get<std::string>(), *model);
    clean = cached_features(*model, data.inputs, &cache, ctx.workers());
  }
  const auto records = scorer.score(data.inputs, data.ids, clean);
  std::string lines;
  for (std::size_t i = 0; i < records.size(); ++i) lines += score_line(records[i], data.labels[i], data.generators[i]) + "\n";
  write_text(ctx.out_dir / "scores.jsonl", lines);
  if (!data.errors.empty()) {
    Config errs = Config::array();
    for (const auto& [path, msg] : data.errors) errs.push_back({{"path", path}, {"message", msg}});
    write_text(ctx.out_dir / "errors.json", errs.dump(2) + "\n");
  }
  ctx.out << "scored " << records.size() << " images -> " << (ctx.out_dir / "scores.jsonl").string() << "\n";
}

BenchmarkOptions benchmark_options(const Context& ctx) {
  const Config& opt = ctx.cfg.at("options");
  BenchmarkOptions o;
  o.workers = ctx.workers();
  o.degradation = degradation_from(opt);
  o.degradation_seed = opt.value("degrade_seed", std::uint64_t{0});
  if (opt.contains("feature_cache") && !opt["feature_cache"].is_null())
    o.feature_cache_dir = opt["feature_cache"].get<std::string>();
  return o;
}

ReportFormat format_of(const Config& cfg) {
  return cfg.at("format").get<std::string>() == "csv" ? ReportFormat::csv : ReportFormat::json;
}

void run_benchmark_cmd(const Context& ctx) {
  const Backbone model = load_model(ctx.cfg.at("model"));
  const PerturbationSpec spec = spec_from(ctx.cfg);
  const auto seeds = ctx.cfg.at("seeds").get<std::vector<std::uint64_t>>();
  const auto report =
      run_benchmark(load_manifest(ctx.cfg.at("manifest").get<std::string>()), model, spec, seeds, benchmark_options(ctx));
  emit_report(report, ctx.out_dir, format_of(ctx.cfg), ctx.cfg.at("plots").get<bool>());
  ctx.out << "AUROC " << report.overall.at("auroc").mean << " +- " << report.overall.at("auroc").std << " over "
          << seeds.size() << " seeds\n";
}

void run_attack(const Context& ctx) {
  const Config& opt = ctx.cfg.at("options");
  const Backbone model = load_model(ctx.cfg.at("model"));
  const PerturbationSpec spec = spec_from(ctx.cfg);
  const auto seeds = ctx.cfg.at("seeds").get<std::vector<std::uint64_t>>();
  const auto manifest = load_manifest(ctx.cfg.at("manifest").get<std::string>());
  const LoadedDataset data = load_dataset(manifest, model.arch());

  BenchmarkOptions base = benchmark_options(ctx);
  base.degradation.reset();
  const auto clean = run_benchmark(data, model, spec, seeds, base, manifest.name);
  BenchmarkOptions attacked_opts = base;
  attacked_opts.degradation = DegradationSpec::attack(parse_degradation_kind(opt.at("attack").get<std::string>()),
                                                      opt.at("sigma").get<double>());
  attacked_opts.degradation_seed = opt.at("attack_seed").get<std::uint64_t>();
  const auto attacked = run_benchmark(data, model, spec, seeds, attacked_opts, manifest.name);

  const bool plots = ctx.cfg.at("plots").get<bool>();
  emit_report(clean, ctx.out_dir / "clean", format_of(ctx.cfg), plots);
  emit_report(attacked, ctx.out_dir / "attacked", format_of(ctx.cfg), plots);
  Config summary;
  summary["attack"] = attacked_opts.degradation->to_string();
  summary["clean_auroc"] = clean.overall.at("auroc").mean;
  summary["attacked_auroc"] = attacked.overall.at("auroc").mean;
  summary["delta_auroc"] = attacked.overall.at("auroc").mean - clean.overall.at("auroc").mean;
  write_text(ctx.out_dir / "attack.json", summary.dump(2) + "\n");
  ctx.out << summary["attack"].get<std::string>() << ": AUROC " << clean.overall.at("auroc").mean << " -> "
          << attacked.overall.at("auroc").mean << "\n";
}

std::vector<fs::path> image_files(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw MissingFileError(dir.string());
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    std::string ext = e.path().extension().string();
    std::ranges::transform(ext, ext.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    if (ext == ".png" || ext == ".jpg" || ext == ".jpeg" || ext == ".webp") files.push_back(e.path());
  }
  std::ranges::sort(files);
  return files;
}

void run_probe(const Context& ctx) {
  const Config& opt = ctx.cfg.at("options");
  const auto model = std::make_shared<const Backbone>(load_model(ctx.cfg.at("model")));
  const double ratio = opt.at("ratio").get<double>();
  const std::uint64_t seed = opt.at("seed").get<std::uint64_t>();

  ProbeReport report;
  Config extra = Config::object();
  if (!opt.at("sweep").is_null()) {
    const auto manifest = load_manifest(ctx.cfg.at("manifest").get<std::string>());
    const LoadedDataset data = load_dataset(manifest, model->arch());
    const auto ks = opt.at("sweep").get<std::vector<std::size_t>>();
    const PrefixSweep sweep = sweep_prefix_supervised(model, data, ratio, seed, ks, ctx.workers());
    report.method = ProbeMethod::supervised_prefix;
    for (std::size_t b = 0; b < sweep.best_k; ++b) report.selected_blocks.insert(b);
    Config curve = Config::array();
    for (const auto& [k, auroc] : sweep.curve) curve.push_back({{"k", k}, {"auroc", auroc}});
    extra["best_k"] = sweep.best_k;
    extra["curve"] = curve;
    if (ctx.cfg.at("plots").get<bool>()) {
      std::vector<double> xs, ys;
      for (const auto& [k, auroc] : sweep.curve) xs.push_back(static_cast<double>(k)), ys.push_back(auroc);
      plot_curve(ctx.out_dir / "prefix_sweep.png", xs, ys, "validation AUROC vs perturbed prefix length");
    }
  } else {
    std::vector<PreprocessedImage> images;
    const auto max_images = opt.at("max_images").get<std::size_t>();
    if (!opt.at("natural_dir").is_null()) {
      for (const auto& path : image_files(opt.at("natural_dir").get<std::string>())) {
        if (images.size() >= max_images) break;
        images.push_back(load_image(path, model->arch()));
      }
    } else {
      const auto manifest = load_manifest(ctx.cfg.at("manifest").get<std::string>());
      for (const auto& e : manifest.entries) {
        if (images.size() >= max_images) break;
        if (e.label == kNatural) images.push_back(load_image(e.path, model->arch()));
      }
    }
    report = probe_blocks_natural(model, images, ratio, seed, ctx.workers());
    report.selected_blocks = select_blocks_topk(report, opt.at("topk").get<std::size_t>());
    extra["n_images"] = images.size();
    if (ctx.cfg.at("plots").get<bool>()) {
      std::vector<double> sims;
      for (const auto& [b, s] : report.per_block_similarity) sims.push_back(s);
      plot_bars(ctx.out_dir / "probe_bars.png", sims, "natural-image similarity per block (%)");
    }
  }
  Config j = Config::parse(report.to_json());
  for (auto it = extra.begin(); it != extra.end(); ++it) j[it.key()] = it.value();
  write_text(ctx.out_dir / "probe.json", j.dump(2) + "\n");
  ctx.out << "selected blocks:";
  for (auto b : report.selected_blocks) ctx.out << ' ' << b;
  ctx.out << "\n";
}

void run_calibrate(const Context& ctx) {
  const Config& opt = ctx.cfg.at("options");
  const auto model = std::make_shared<const Backbone>(load_model(ctx.cfg.at("model")));
  const AdapterConfig config = AdapterConfig::from_json(opt.at("adapter").dump());
  const LoadedDataset data = load_dataset(load_manifest(ctx.cfg.at("manifest").get<std::string>()), model->arch());
  const auto ckpt = train_calibration(model, data, config, opt.at("seed").get<std::uint64_t>(),
                                      opt.at("max_steps").get<int>());
  const fs::path dest = opt.at("out").is_null() ? ctx.out_dir / "calibration.safetensors"
                                                 : fs::path(opt.at("out").get<std::string>());
  if (dest.has_parent_path()) fs::create_directories(dest.parent_path());
  ckpt.save(dest);
  Config curve;
  curve["config_hash"] = config.hash();
  curve["loss_curve"] = ckpt.loss_curve;
  write_text(ctx.out_dir / "loss_curve.json", curve.dump(2) + "\n");
  if (ctx.cfg.at("plots").get<bool>() && !ckpt.loss_curve.empty()) {
    std::vector<double> xs(ckpt.loss_curve.size());
    std::iota(xs.begin(), xs.end(), 0.0);
    plot_curve(ctx.out_dir / "loss_curve.png", xs, ckpt.loss_curve, "calibration loss per step");
  }
  ctx.out << "trained " << ckpt.loss_curve.size() << " steps -> " << dest.string() << "\n";
}

Image centre_crop(const Image& img, int size) {
  const int top = (img.height - size) / 2;
  const int left = (img.width - size) / 2;
  Image out(img.channels, size, size);
  for (int c = 0; c < img.channels; ++c)
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x) out.at(c, y, x) = img.at(c, top + y, left + x);
  return out;
}

Config theory_sensitivity(const Config& opt, const Backbone& full) {
  const auto depth = opt.at("depth").get<std::size_t>();
  const std::uint64_t seed = opt.at("seed").get<std::uint64_t>();
  const Backbone model = depth < full.block_count() ? truncate_blocks(full, depth) : full;
  const PreprocessedImage image =
      opt.at("image").is_null()
          ? standardize(centre_crop(toy_natural_image(seed, 0), model.arch().image_size), model.arch(), "toy-natural-0")
          : load_image(opt.at("image").get<std::string>(), model.arch());
  const BackboneMap map(model, image);
  const int draws = opt.at("n_draws").get<int>();
  const auto mc = mc_sensitivity(map, std::nullopt, draws, seed);
  const auto half = mc_sensitivity(map, mc.sigma / 2, draws, seed);
  const double h = 1e-4 * map.parameter_scale();
  const double fd = fd_sensitivity_oracle(map, h);
  const double fd_half = fd_sensitivity_oracle(map, h / 2);

  Eigen::VectorXd x(16), theta(16);
  Engine eng = make_engine({seed, 0x11});
  std::normal_distribution<double> normal(0.0, 1.0);
  for (Eigen::Index i = 0; i < 16; ++i) x[i] = normal(eng), theta[i] = normal(eng);
  const LinearMap linear(x, theta);
  const auto lin = mc_sensitivity(linear, 0.01, draws, seed);

  Config r;
  r["check"] = "sensitivity";
  r["arch_id"] = model.arch_id();
  r["parameter_count"] = map.parameter_count();
  r["mc"] = {{"value", mc.value}, {"sigma", mc.sigma}, {"n_draws", mc.n_draws}, {"std_error", mc.std_error}};
  r["mc_half_sigma"] = {{"value", half.value}, {"sigma", half.sigma}, {"std_error", half.std_error}};
  r["fd"] = {{"value", fd}, {"h", h}, {"value_half_h", fd_half}};
  r["relative_error"] = std::abs(mc.value - fd) / fd;
  r["linear"] = {{"expected", x.squaredNorm()},
                 {"value", lin.value},
                 {"std_error", lin.std_error},
                 {"z", (lin.value - x.squaredNorm()) / lin.std_error}};
  return r;
}

Config theory_theorem1(const Config& opt) {
  const std::uint64_t seed = opt.at("seed").get<std::uint64_t>();
  Config r;
  r["check"] = "theorem1";
  for (bool control : {false, true}) {
    const auto rep = differential_sensitivity_check(seed, control);
    r[control ? "control" : "main"] = {{"mean_sen_id", rep.mean_sen_id},
                                       {"mean_sen_ood", rep.mean_sen_ood},
                                       {"bootstrap_fraction", rep.bootstrap_fraction},
                                       {"final_train_loss", rep.final_train_loss}};
  }
  return r;
}

Config theory_bvm(const Config& opt) {
  const auto ns = opt.at("n_values").get<std::vector<int>>();
  const double noise = opt.at("noise_var").get<double>();
  const double prior = opt.at("prior_var").get<double>();
  const auto vars = posterior_variance_demo(ns, noise, prior);
  Config r;
  r["check"] = "bvm";
  r["noise_var"] = noise;
  r["prior_var"] = prior;
  Config rows = Config::array();
  for (std::size_t i = 0; i < ns.size(); ++i) rows.push_back({{"n", ns[i]}, {"posterior_var", vars[i]}});
  r["posterior"] = rows;
  return r;
}

Config theory_bound_gap(const Config& opt) {
  const std::uint64_t seed = opt.at("seed").get<std::uint64_t>();
  const int instances = opt.at("instances").get<int>();
  Engine eng = make_engine({seed, 0xb9});
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_int_distribution<int> count(2, 8);
  const int dims[] = {8, 32, 128};
  double max_diff = 0.0;
  int violations = 0;
  double max_ratio = 0.0;
  for (int t = 0; t < instances; ++t) {
    const int n = count(eng);
    const int d = dims[t % 3];
    std::vector<FeatureVector> feats(n, FeatureVector(d));
    FeatureVector teacher(d);
    for (auto& f : feats)
      for (Eigen::Index i = 0; i < d; ++i) f[i] = normal(eng);
    for (Eigen::Index i = 0; i < d; ++i) teacher[i] = normal(eng);
    for (const auto& g : bound_gap(feats, teacher)) max_diff = std::max(max_diff, std::abs(g.delta - g.delta_sine));
    std::vector<double> preds;
    for (const auto& f : feats) preds.push_back(f.dot(teacher));
    const double var = ensemble_variance(preds);
    const double bound = variance_upper_bound(feats, teacher);
    if (var > bound + 1e-9) ++violations;
    max_ratio = std::max(max_ratio, var / bound);
  }
  Config r;
  r["check"] = "bound-gap";
  r["instances"] = instances;
  r["max_abs_difference"] = max_diff;
  r["cauchy_schwarz_violations"] = violations;
  r["max_variance_to_bound_ratio"] = max_ratio;
  return r;
}

void run_theory(const Context& ctx) {
  const Config& opt = ctx.cfg.at("options");
  const std::string check = opt.at("check").get<std::string>();
  Config result;
  if (check == "sensitivity") {
    result = theory_sensitivity(opt, load_model(ctx.cfg.at("model")));
  } else if (check == "theorem1") {
    result = theory_theorem1(opt);
  } else if (check == "bvm") {
    result = theory_bvm(opt);
  } else if (check == "bound-gap") {
    result = theory_bound_gap(opt);
  } else {
    throw ValidationError("unknown theory check: " + check);
  }
  const fs::path path = ctx.out_dir / ("theory_" + check + ".json");
  write_text(path, result.dump(2) + "\n");
  ctx.out << result.dump(2) << "\n";
}

void run_fid(const Context& ctx) {
  const Backbone model = load_model(ctx.cfg.at("model"));
  const LoadedDataset data = load_dataset(load_manifest(ctx.cfg.at("manifest").get<std::string>()), model.arch());
  const auto feats = extract_raw_features(model, data.inputs, ctx.workers());
  std::vector<FeatureVector> natural;
  std::map<std::string, std::vector<FeatureVector>> generated;
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (data.labels[i] == kNatural) {
      natural.push_back(feats[i]);
    } else {
      generated[data.generators[i].empty() ? "generated" : data.generators[i]].push_back(feats[i]);
      generated["all"].push_back(feats[i]);
    }
  }
  Config r;
  r["arch_id"] = model.arch_id();
  Config per = Config::object();
  for (const auto& [gen, fs_] : generated) {
    const auto fid = compute_fid(natural, fs_);
    per[gen] = {{"fid", fid.value}, {"n_natural", fid.n_a}, {"n_generated", fid.n_b}};
    ctx.out << gen << ": FID " << fid.value << "\n";
  }
  r["fid"] = per;
  write_text(ctx.out_dir / "fid.json", r.dump(2) + "\n");
}

void run_convert(const Context& ctx) {
  const Config& opt = ctx.cfg.at("options");
  const fs::path dest = opt.at("dst").get<std::string>();
  if (dest.has_parent_path()) fs::create_directories(dest.parent_path());
  convert_dinov2_checkpoint(opt.at("src").get<std::string>(), dest, opt.at("arch").get<std::string>());
  ctx.out << "wrote " << dest.string() << "\n";
}

void run_make_toy(const Context& ctx) {
  const Config& opt = ctx.cfg.at("options");
  const auto toy = make_toy_benchmark(ctx.out_dir, opt.at("seed").get<std::uint64_t>(), opt.at("n_per_class").get<int>());
  ctx.out << "train manifest: " << toy.train_manifest.string() << "\n"
          << "test manifest:  " << toy.test_manifest.string() << "\n"
          << "checkpoint:     " << toy.checkpoint.string() << "\n";
}

void execute(const Config& cfg, std::ostream& out) {
  const std::string command = cfg.at("command").get<std::string>();
  const fs::path out_dir = cfg.at("output").get<std::string>();
  fs::create_directories(out_dir);
  write_text(out_dir / "run.json", cfg.dump(2) + "\n");
  const Context ctx{cfg, out_dir, out};
  if (command == "score") return run_score(ctx);
  if (command == "benchmark") return run_benchmark_cmd(ctx);
  if (command == "attack") return run_attack(ctx);
  if (command == "probe") return run_probe(ctx);
  if (command == "calibrate") return run_calibrate(ctx);
  if (command == "theory") return run_theory(ctx);
  if (command == "fid") return run_fid(ctx);
  if (command == "convert-checkpoint") return run_convert(ctx);
  if (command == "make-toy") return run_make_toy(ctx);
  throw ValidationError("unknown command in run file: " + command);
}

Config base_config(const std::string& command, const OutputFlags& output) {
  Config cfg;
  cfg["command"] = command;
  output.fill(cfg);
  return cfg;
}

std::string require_manifest(const std::string& manifest) {
  if (manifest.empty()) throw ValidationError("--manifest is required");
  if (!fs::exists(manifest)) throw MissingFileError(manifest);
  return absolute(manifest);
}

Config degrade_option(const std::string& degrade) {
  if (degrade.empty()) return nullptr;
  return DegradationSpec::parse(degrade).to_string();
}

}  // namespace

int run_command(std::span<const std::string> args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Weight-perturbation detector for generated images", "wepe"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Show help for every subcommand");

  ModelFlags model;
  SpecFlags spec;
  OutputFlags output;
  std::string manifest;
  std::uint64_t seed = 0;
  std::string seeds = "0,1,2,3,4";
  std::string degrade;
  std::uint64_t degrade_seed = 0;
  std::string feature_cache;

  auto* score = app.add_subcommand("score", "Score every image of a manifest");
  model.add(score);
  spec.add(score);
  output.add(score);
  score->add_option("--manifest", manifest, "Dataset manifest (JSON)")->required();
  score->add_option("--seed", seed, "Perturbation seed");
  score->add_option("--degrade", degrade, "Degradation kind:strength, e.g. jpeg:75, blur:1.5, noise:0.05");
  score->add_option("--degrade-seed", degrade_seed, "Seed for random degradations");
  score->add_option("--feature-cache", feature_cache, "Directory of the clean-feature cache");

  auto* bench = app.add_subcommand("benchmark", "Multi-seed AUROC/AP/ACC evaluation of a manifest");
  model.add(bench);
  spec.add(bench);
  output.add(bench, true);
  bench->add_option("--manifest", manifest, "Dataset manifest (JSON)")->required();
  bench->add_option("--seeds", seeds, "Comma-separated perturbation seeds");
  bench->add_option("--degrade", degrade, "Degradation kind:strength applied before scoring");
  bench->add_option("--degrade-seed", degrade_seed, "Seed for random degradations");
  bench->add_option("--feature-cache", feature_cache, "Directory of the clean-feature cache");

  std::string attack_kind = "sda";
  double attack_sigma = 0.1;
  auto* attack = app.add_subcommand("attack", "Benchmark before and after an evasion attack on generated images");
  model.add(attack);
  spec.add(attack);
  output.add(attack, true);
  attack->add_option("--manifest", manifest, "Dataset manifest (JSON)")->required();
  attack->add_option("--seeds", seeds, "Comma-separated perturbation seeds");
  attack->add_option("--attack", attack_kind, "sda (spatial noise) or fda (frequency noise)");
  attack->add_option("--sigma", attack_sigma, "Attack noise level");
  attack->add_option("--attack-seed", degrade_seed, "Seed of the attack noise");

  std::string natural_dir;
  std::size_t topk = 0;
  std::size_t max_images = 64;
  std::string sweep;
  double probe_ratio = 0.1;
  auto* probe = app.add_subcommand("probe", "Rank blocks by natural-image stability and pick the top k");
  model.add(probe);
  output.add(probe);
  probe->add_option("--natural-dir", natural_dir, "Directory of natural images");
  probe->add_option("--manifest", manifest, "Manifest (natural entries for the probe; both labels for --sweep)");
  probe->add_option("--topk", topk, "Number of blocks to select (default: the scaled 19-of-24 rule)");
  probe->add_option("--max-images", max_images, "Natural images used by the probe");
  probe->add_option("--ratio", probe_ratio, "Perturbation ratio");
  probe->add_option("--seed", seed, "Perturbation seed");
  probe->add_option("--sweep", sweep, "Supervised prefix sweep over these k (e.g. 1-4) instead of the natural probe");

  AdapterConfig adapter;
  std::string direction = "widen";
  std::string calib_out;
  int max_steps = -1;
  bool no_augment = false;
  auto* calibrate = app.add_subcommand("calibrate", "Train low-rank adapters that widen the similarity gap");
  model.add(calibrate, false);
  output.add(calibrate);
  calibrate->add_option("--manifest", manifest, "Training manifest with both labels")->required();
  calibrate->add_option("--out", calib_out, "Adapter checkpoint path (default: <output>/calibration.safetensors)");
  calibrate->add_option("--seed", seed, "Training seed");
  calibrate->add_option("--rank", adapter.rank, "Adapter rank");
  calibrate->add_option("--alpha", adapter.alpha, "Adapter scale numerator (update scale is alpha / rank)");
  calibrate->add_option("--lr", adapter.learning_rate, "AdamW learning rate");
  calibrate->add_option("--weight-decay", adapter.weight_decay, "AdamW decoupled weight decay");
  calibrate->add_option("--epochs", adapter.epochs, "Training epochs");
  calibrate->add_option("--batch-size", adapter.batch_size, "Images per step (half natural, half generated)");
  calibrate->add_option("--ratio", adapter.ratio, "Perturbation ratio for the per-step target");
  calibrate->add_option("--blocks", spec.blocks, "Blocks perturbed for the target");
  calibrate->add_option("--direction", direction, "widen (default) or literal loss sign");
  calibrate->add_option("--max-steps", max_steps, "Stop after this many steps (-1: no limit)");
  calibrate->add_flag("--no-augment", no_augment, "Disable JPEG/blur augmentation");

  std::string check;
  int n_draws = 1000;
  std::size_t depth = 1;
  std::string image;
  std::string n_values = "1,10,100,1000";
  double noise_var = 1.0, prior_var = 1.0;
  int instances = 50;
  auto* theory = app.add_subcommand("theory", "Desk checks of the sensitivity theory");
  model.add(theory, false);
  output.add(theory);
  theory->add_option("--check", check, "sensitivity, theorem1, bvm or bound-gap")
      ->required()
      ->check(CLI::IsMember({"sensitivity", "theorem1", "bvm", "bound-gap"}));
  theory->add_option("--seed", seed, "Seed");
  theory->add_option("--n-draws", n_draws, "Monte-Carlo draws (sensitivity)");
  theory->add_option("--depth", depth, "Blocks kept for the finite-difference oracle (sensitivity)");
  theory->add_option("--image", image, "Input image (sensitivity; default: a toy natural image)");
  theory->add_option("--n-values", n_values, "Sample counts (bvm)");
  theory->add_option("--noise-var", noise_var, "Observation variance (bvm)");
  theory->add_option("--prior-var", prior_var, "Prior variance (bvm)");
  theory->add_option("--instances", instances, "Random instances (bound-gap)");

  auto* fid = app.add_subcommand("fid", "Frechet distance between natural and generated features");
  model.add(fid);
  output.add(fid);
  fid->add_option("--manifest", manifest, "Dataset manifest (JSON)")->required();

  std::string src, dst, convert_arch = "vit-l-14";
  auto* convert = app.add_subcommand("convert-checkpoint", "Convert a public DINOv2 checkpoint");
  output.add(convert);
  convert->add_option("--src", src, "Source checkpoint (safetensors)")->required();
  convert->add_option("--dst", dst, "Destination archive")->required();
  convert->add_option("--arch", convert_arch, "Target architecture id");

  int n_per_class = 64;
  auto* toy = app.add_subcommand("make-toy", "Write the offline toy benchmark");
  output.add(toy);
  toy->add_option("--seed", seed, "Seed");
  toy->add_option("--n-per-class", n_per_class, "Images per class in each split");

  std::string run_file;
  std::string replay_output;
  auto* replay = app.add_subcommand("replay", "Re-run a resolved run.json");
  replay->add_option("run_file", run_file, "run.json written by an earlier run")->required();
  replay->add_option("--output,-o", replay_output, "Output directory (default: the recorded one)");

  std::vector<std::string> argv(args.rbegin(), args.rend());
  try {
    app.parse(argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n";
    const auto subs = app.get_subcommands();
    err << (subs.empty() ? app.help() : subs.front()->help());
    return 1;
  }

  try {
    Config cfg;
    const auto parsed = app.get_subcommands().front();
    const std::string name = parsed->get_name();
    if (name == "replay") {
      cfg = Config::parse(read_text(run_file));
      if (!replay_output.empty()) cfg["output"] = absolute(replay_output);
    } else {
      cfg = base_config(name, output);
      Config options = Config::object();
      if (name == "score" || name == "benchmark" || name == "attack" || name == "fid") {
        cfg["model"] = model.resolve();
        const ArchSpec& arch = find_arch(model.arch);
        if (name != "fid") {
          const auto seed_list = name == "score" ? std::vector<std::uint64_t>{seed} : parse_seeds(seeds);
          cfg["spec"] = spec.resolve(arch, seed_list.front());
          cfg["seeds"] = seed_list;
        }
        cfg["manifest"] = require_manifest(manifest);
        if (name == "score" || name == "benchmark") {
          options["degrade"] = degrade_option(degrade);
          options["degrade_seed"] = degrade_seed;
          options["feature_cache"] = feature_cache.empty() ? Config(nullptr) : Config(absolute(feature_cache));
        } else if (name == "attack") {
          const auto kind = parse_degradation_kind(attack_kind);
          if (kind != DegradationKind::sda && kind != DegradationKind::fda)
            throw ValidationError("--attack must be sda or fda");
          options["attack"] = attack_kind;
          options["sigma"] = attack_sigma;
          options["attack_seed"] = degrade_seed;
        }
      } else if (name == "probe") {
        cfg["model"] = model.resolve();
        const ArchSpec& arch = find_arch(model.arch);
        const auto depth_b = static_cast<std::size_t>(arch.depth);
        options["ratio"] = probe_ratio;
        options["seed"] = seed;
        options["max_images"] = max_images;
        if (!sweep.empty()) {
          const auto ks = parse_block_selection(sweep, depth_b + 1);
          std::vector<std::size_t> list(ks.begin(), ks.end());
          options["sweep"] = list;
          options["natural_dir"] = nullptr;
          options["topk"] = nullptr;
          cfg["manifest"] = require_manifest(manifest);
        } else {
          if (natural_dir.empty() == manifest.empty())
            throw ValidationError("probe needs exactly one of --natural-dir or --manifest");
          options["sweep"] = nullptr;
          options["natural_dir"] = natural_dir.empty() ? Config(nullptr) : Config(absolute(natural_dir));
          if (!natural_dir.empty() && !fs::is_directory(natural_dir)) throw MissingFileError(natural_dir);
          cfg["manifest"] = manifest.empty() ? Config(nullptr) : Config(require_manifest(manifest));
          options["topk"] = topk == 0 ? default_blocks(depth_b).size() : topk;
        }
      } else if (name == "calibrate") {
        cfg["model"] = model.resolve();
        const ArchSpec& arch = find_arch(model.arch);
        cfg["manifest"] = require_manifest(manifest);
        if (direction != "widen" && direction != "literal") throw ValidationError("--direction must be widen or literal");
        adapter.direction = direction == "widen" ? GapDirection::widen : GapDirection::literal;
        adapter.augment = !no_augment;
        const auto depth_b = static_cast<std::size_t>(arch.depth);
        adapter.blocks = spec.blocks == "default" ? default_blocks(depth_b) : parse_block_selection(spec.blocks, depth_b);
        adapter.validate();
        options["adapter"] = Config::parse(adapter.to_json());
        options["seed"] = seed;
        options["max_steps"] = max_steps;
        options["out"] = calib_out.empty() ? Config(nullptr) : Config(absolute(calib_out));
      } else if (name == "theory") {
        cfg["model"] = model.resolve();
        options["check"] = check;
        options["seed"] = seed;
        options["n_draws"] = n_draws;
        options["depth"] = depth;
        options["image"] = image.empty() ? Config(nullptr) : Config(absolute(image));
        std::vector<int> ns;
        for (auto v : parse_seeds(n_values)) ns.push_back(static_cast<int>(v));
        options["n_values"] = ns;
        options["noise_var"] = noise_var;
        options["prior_var"] = prior_var;
        options["instances"] = instances;
      } else if (name == "convert-checkpoint") {
        if (!fs::exists(src)) throw MissingFileError(src);
        find_arch(convert_arch);
        options["src"] = absolute(src);
        options["dst"] = absolute(dst);
        options["arch"] = convert_arch;
      } else if (name == "make-toy") {
        options["seed"] = seed;
        options["n_per_class"] = n_per_class;
      }
      cfg["options"] = options;
    }
    execute(cfg, out);
    return 0;
  } catch (const ValidationError& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  } catch (const nlohmann::json::exception& e) {
    err << "error: malformed run file: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    err << "failure: " << e.what() << "\n";
    return 2;
  }
}

int run_command(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return run_command(args, std::cout, std::cerr);
}

}  // namespace wepe::cli
