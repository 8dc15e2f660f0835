#include "wepe/theory.hpp"

#include <cmath>
#include <numbers>
#include <random>

#include "wepe/autograd.hpp"
#include "wepe/error.hpp"
#include "wepe/rng.hpp"

namespace wepe {

double ParametricMap::parameter_scale() const {
  const Eigen::VectorXd theta = parameters();
  return theta.size() ? theta.cwiseAbs().mean() : 0.0;
}

Eigen::VectorXd LinearMap::evaluate(const Eigen::VectorXd& theta) const {
  return Eigen::VectorXd::Constant(1, theta.dot(x_));
}

BackboneMap::BackboneMap(const Backbone& model, PreprocessedImage image)
    : work_(std::make_shared<Backbone>(model)), image_(std::move(image)) {
  for (const auto& [name, t] : work_->all_params()) {
    names_.push_back(name);
    count_ += t.numel();
  }
}

Eigen::VectorXd BackboneMap::parameters() const {
  Eigen::VectorXd theta(count_);
  Eigen::Index off = 0;
  for (const auto& name : names_) {
    const Tensor& t = work_->param(name);
    theta.segment(off, t.numel()) = Eigen::Map<const Eigen::VectorXd>(t.data(), t.numel());
    off += t.numel();
  }
  return theta;
}

Eigen::VectorXd BackboneMap::evaluate(const Eigen::VectorXd& theta) const {
  if (theta.size() != count_) throw ValidationError("parameter vector has the wrong length");
  Eigen::Index off = 0;
  for (const auto& name : names_) {
    Tensor t = work_->param(name);
    Eigen::Map<Eigen::VectorXd>(t.data(), t.numel()) = theta.segment(off, t.numel());
    off += t.numel();
    work_->set_param(name, std::move(t));
  }
  return extract_raw_features(*work_, std::span(&image_, 1))[0];
}

SmallMlp SmallMlp::random(std::vector<int> widths, std::uint64_t seed) {
  if (widths.size() < 2) throw ValidationError("an MLP needs at least input and output widths");
  SmallMlp net;
  net.widths = std::move(widths);
  Engine eng = make_engine({seed, 0x31a});
  for (std::size_t l = 0; l + 1 < net.widths.size(); ++l) {
    const int in = net.widths[l];
    const int out = net.widths[l + 1];
    std::normal_distribution<double> normal(0.0, 1.0 / std::sqrt(static_cast<double>(in)));
    RowMatrix w(out, in);
    for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = normal(eng);
    net.weights.push_back(std::move(w));
    net.biases.push_back(Eigen::VectorXd::Zero(out));
  }
  return net;
}

Eigen::Index SmallMlp::parameter_count() const {
  Eigen::Index n = 0;
  for (std::size_t l = 0; l < weights.size(); ++l) n += weights[l].size() + biases[l].size();
  return n;
}

Eigen::VectorXd SmallMlp::flat() const {
  Eigen::VectorXd theta(parameter_count());
  Eigen::Index off = 0;
  for (std::size_t l = 0; l < weights.size(); ++l) {
    theta.segment(off, weights[l].size()) = Eigen::Map<const Eigen::VectorXd>(weights[l].data(), weights[l].size());
    off += weights[l].size();
    theta.segment(off, biases[l].size()) = biases[l];
    off += biases[l].size();
  }
  return theta;
}

void SmallMlp::assign(const Eigen::VectorXd& theta) {
  if (theta.size() != parameter_count()) throw ValidationError("parameter vector has the wrong length");
  Eigen::Index off = 0;
  for (std::size_t l = 0; l < weights.size(); ++l) {
    Eigen::Map<Eigen::VectorXd>(weights[l].data(), weights[l].size()) = theta.segment(off, weights[l].size());
    off += weights[l].size();
    biases[l] = theta.segment(off, biases[l].size());
    off += biases[l].size();
  }
}

Eigen::VectorXd SmallMlp::probabilities(const Eigen::VectorXd& x) const {
  Eigen::VectorXd h = x;
  for (std::size_t l = 0; l < weights.size(); ++l) {
    h = weights[l] * h + biases[l];
    if (l + 1 < weights.size()) h = h.array().tanh();
  }
  const double top = h.maxCoeff();
  Eigen::VectorXd e = (h.array() - top).exp();
  return e / e.sum();
}

Eigen::VectorXd MlpMap::evaluate(const Eigen::VectorXd& theta) const {
  SmallMlp net = net_;
  net.assign(theta);
  return net.probabilities(x_);
}

namespace {

// Neumaier-compensated running sum.
struct CompensatedSum {
  double sum = 0.0;
  double carry = 0.0;
  void add(double v) {
    const double t = sum + v;
    carry += std::abs(sum) >= std::abs(v) ? (sum - t) + v : (v - t) + sum;
    sum = t;
  }
  double value() const { return sum + carry; }
};

}  // namespace

SensitivityEstimate mc_sensitivity(const ParametricMap& map, std::optional<double> sigma_opt, int n_draws,
                                   std::uint64_t seed) {
  if (n_draws < 2) throw ValidationError("mc_sensitivity needs at least 2 draws");
  const double sigma = sigma_opt.value_or(1e-3 * map.parameter_scale());
  if (!(sigma > 0)) throw ValidationError("perturbation sigma must be positive");
  const Eigen::VectorXd theta = map.parameters();
  const Eigen::VectorXd base = map.evaluate(theta);
  std::normal_distribution<double> normal(0.0, sigma);
  CompensatedSum s1, s2;
  for (int k = 0; k < n_draws; ++k) {
    Engine eng = make_engine({seed, static_cast<std::uint64_t>(k)});
    Eigen::VectorXd xi(theta.size());
    for (Eigen::Index i = 0; i < xi.size(); ++i) xi[i] = normal(eng);
    const double v = (map.evaluate(theta + xi) - base).squaredNorm() / (sigma * sigma);
    s1.add(v);
    s2.add(v * v);
  }
  const double n = n_draws;
  const double mean = s1.value() / n;
  const double var = std::max(0.0, (s2.value() - n * mean * mean) / (n - 1));
  return {mean, sigma, n_draws, std::sqrt(var / n)};
}

double fd_sensitivity_oracle(const ParametricMap& map, std::optional<double> step, Eigen::Index cap) {
  const Eigen::Index n = map.parameter_count();
  if (n > cap)
    throw ValidationError("finite-difference oracle limited to " + std::to_string(cap) + " parameters, model has " +
                          std::to_string(n));
  Eigen::VectorXd theta = map.parameters();
  const double h = step.value_or(1e-4 * map.parameter_scale());
  if (!(h > 0)) throw ValidationError("finite-difference step must be positive");
  CompensatedSum total;
  for (Eigen::Index i = 0; i < n; ++i) {
    const double keep = theta[i];
    theta[i] = keep + h;
    const Eigen::VectorXd up = map.evaluate(theta);
    theta[i] = keep - h;
    const Eigen::VectorXd down = map.evaluate(theta);
    theta[i] = keep;
    total.add(((up - down) / (2 * h)).squaredNorm());
  }
  return total.value();
}

namespace {

struct MixtureSample {
  RowMatrix points;  // [n, 2]
  std::vector<int> components;
};

MixtureSample sample_mixture(int n, int k, double radius, double stddev, double angle_offset, Engine& eng) {
  MixtureSample s;
  s.points.resize(n, 2);
  std::uniform_int_distribution<int> pick(0, k - 1);
  std::normal_distribution<double> noise(0.0, stddev);
  for (int i = 0; i < n; ++i) {
    const int c = pick(eng);
    const double angle = 2 * std::numbers::pi * c / k + angle_offset;
    s.points(i, 0) = radius * std::cos(angle) + noise(eng);
    s.points(i, 1) = radius * std::sin(angle) + noise(eng);
    s.components.push_back(c);
  }
  return s;
}

double train_classifier(SmallMlp& net, const MixtureSample& data, const DifferentialSensitivityConfig& c) {
  const auto n = data.points.rows();
  const int classes = net.widths.back();
  RowMatrix onehot = RowMatrix::Zero(n, classes);
  for (Eigen::Index i = 0; i < n; ++i) onehot(i, data.components[i]) = 1.0;

  std::vector<RowMatrix> bias_rows;
  for (const auto& b : net.biases) bias_rows.emplace_back(b.transpose());
  std::vector<RowMatrix*> params;
  for (std::size_t l = 0; l < net.weights.size(); ++l) {
    params.push_back(&net.weights[l]);
    params.push_back(&bias_rows[l]);
  }
  std::vector<RowMatrix> m, v;
  for (auto* p : params) {
    m.push_back(RowMatrix::Zero(p->rows(), p->cols()));
    v.push_back(RowMatrix::Zero(p->rows(), p->cols()));
  }
  constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  double loss = 0.0;
  for (int step = 1; step <= c.train_steps; ++step) {
    std::vector<ag::Var> leaves;
    for (auto* p : params) leaves.push_back(ag::borrow_parameter(*p));
    ag::Var h = ag::constant(data.points);
    for (std::size_t l = 0; l < net.weights.size(); ++l) {
      h = ag::linear(h, leaves[2 * l], leaves[2 * l + 1]);
      if (l + 1 < net.weights.size()) h = ag::tanh(h);
    }
    ag::Var nll = ag::scale(ag::sum(ag::mul(ag::log_softmax_rows(h), ag::constant(onehot))), -1.0 / n);
    loss = nll->val()(0, 0);
    if (!std::isfinite(loss)) throw RuntimeFailure("classifier training diverged at step " + std::to_string(step));
    ag::backward(nll);
    for (std::size_t i = 0; i < params.size(); ++i) {
      const RowMatrix& g = leaves[i]->grad;
      m[i] = b1 * m[i] + (1 - b1) * g;
      v[i] = b2 * v[i] + (1 - b2) * g.cwiseProduct(g);
      const double c1 = 1 - std::pow(b1, step);
      const double c2 = 1 - std::pow(b2, step);
      params[i]->array() -= c.learning_rate * (m[i].array() / c1) / ((v[i].array() / c2).sqrt() + eps);
    }
  }
  for (std::size_t l = 0; l < net.biases.size(); ++l) net.biases[l] = bias_rows[l].transpose();
  return loss;
}

std::vector<double> sensitivities(const SmallMlp& net, const RowMatrix& points, int draws, std::uint64_t seed) {
  std::vector<double> out;
  for (Eigen::Index i = 0; i < points.rows(); ++i) {
    MlpMap map(net, points.row(i).transpose());
    out.push_back(mc_sensitivity(map, std::nullopt, draws, stream_seed({seed, static_cast<std::uint64_t>(i)})).value);
  }
  return out;
}

double mean_of(const std::vector<double>& xs) {
  double s = 0.0;
  for (double x : xs) s += x;
  return s / static_cast<double>(xs.size());
}

}  // namespace

DifferentialSensitivityReport differential_sensitivity_check(std::uint64_t seed, bool control,
                                                             const DifferentialSensitivityConfig& c) {
  if (c.n_components < 2 || c.n_train < 1 || c.n_eval < 2 || c.mc_draws < 2 || c.bootstrap < 1)
    throw ValidationError("invalid differential sensitivity configuration");
  Engine data_eng = make_engine({seed, 0xd1});
  const MixtureSample train = sample_mixture(c.n_train, c.n_components, c.radius, c.component_std, 0.0, data_eng);
  const MixtureSample held_out = sample_mixture(c.n_eval, c.n_components, c.radius, c.component_std, 0.0, data_eng);
  const double half_step = std::numbers::pi / c.n_components;
  const MixtureSample shifted =
      sample_mixture(c.n_eval, c.n_components, c.radius, c.component_std, half_step, data_eng);

  SmallMlp net = SmallMlp::random({2, c.hidden, c.hidden, c.n_components}, stream_seed({seed, 0x1e7}));
  DifferentialSensitivityReport r;
  r.control = control;
  r.final_train_loss = train_classifier(net, train, c);

  const std::uint64_t sen_seed = stream_seed({seed, 0x5e5});
  r.sen_id = sensitivities(net, held_out.points, c.mc_draws, sen_seed);
  r.sen_ood = control ? r.sen_id : sensitivities(net, shifted.points, c.mc_draws, stream_seed({sen_seed, 1}));
  r.mean_sen_id = mean_of(r.sen_id);
  r.mean_sen_ood = mean_of(r.sen_ood);

  Engine boot = make_engine({seed, 0xb007});
  std::uniform_int_distribution<std::size_t> pick_id(0, r.sen_id.size() - 1);
  std::uniform_int_distribution<std::size_t> pick_ood(0, r.sen_ood.size() - 1);
  int below = 0;
  for (int b = 0; b < c.bootstrap; ++b) {
    double a = 0.0, o = 0.0;
    for (std::size_t i = 0; i < r.sen_id.size(); ++i) a += r.sen_id[pick_id(boot)];
    for (std::size_t i = 0; i < r.sen_ood.size(); ++i) o += r.sen_ood[pick_ood(boot)];
    if (a / r.sen_id.size() < o / r.sen_ood.size()) ++below;
  }
  r.bootstrap_fraction = static_cast<double>(below) / c.bootstrap;
  return r;
}

std::vector<double> posterior_variance_demo(std::span<const int> n_values, double noise_var, double prior_var) {
  if (!(noise_var > 0) || !(prior_var > 0)) throw ValidationError("variances must be positive");
  std::vector<double> out;
  for (int n : n_values) {
    if (n < 0) throw ValidationError("sample counts must be nonnegative");
    out.push_back(1.0 / (1.0 / prior_var + n / noise_var));
  }
  return out;
}

}  // namespace wepe
