#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "wepe/backbone.hpp"

namespace wepe {

/// A map x -> f(x; theta) with x fixed, seen as a function of a flat parameter vector.
class ParametricMap {
 public:
  virtual ~ParametricMap() = default;
  virtual Eigen::Index parameter_count() const = 0;
  virtual Eigen::VectorXd parameters() const = 0;
  virtual Eigen::VectorXd evaluate(const Eigen::VectorXd& theta) const = 0;
  /// Mean absolute parameter value; the default scale for sigma and h.
  double parameter_scale() const;
};

/// f(x; theta) = theta . x (scalar output).
class LinearMap final : public ParametricMap {
 public:
  LinearMap(Eigen::VectorXd x, Eigen::VectorXd theta) : x_(std::move(x)), theta_(std::move(theta)) {}
  Eigen::Index parameter_count() const override { return theta_.size(); }
  Eigen::VectorXd parameters() const override { return theta_; }
  Eigen::VectorXd evaluate(const Eigen::VectorXd& theta) const override;

 private:
  Eigen::VectorXd x_, theta_;
};

/// f(x; theta) = c regardless of theta.
class ConstantMap final : public ParametricMap {
 public:
  ConstantMap(Eigen::VectorXd value, Eigen::VectorXd theta) : value_(std::move(value)), theta_(std::move(theta)) {}
  Eigen::Index parameter_count() const override { return theta_.size(); }
  Eigen::VectorXd parameters() const override { return theta_; }
  Eigen::VectorXd evaluate(const Eigen::VectorXd&) const override { return value_; }

 private:
  Eigen::VectorXd value_, theta_;
};

/// Raw (un-normalised) class-token feature of one image; parameters are every
/// backbone tensor flattened in name order.
class BackboneMap final : public ParametricMap {
 public:
  BackboneMap(const Backbone& model, PreprocessedImage image);
  Eigen::Index parameter_count() const override { return count_; }
  Eigen::VectorXd parameters() const override;
  Eigen::VectorXd evaluate(const Eigen::VectorXd& theta) const override;

 private:
  std::shared_ptr<Backbone> work_;
  PreprocessedImage image_;
  std::vector<std::string> names_;
  Eigen::Index count_ = 0;
};

/// Fully connected tanh network with a softmax output, evaluated at one input.
struct SmallMlp {
  std::vector<int> widths;           // e.g. {2, 16, 16, 4}
  std::vector<RowMatrix> weights;    // [out, in]
  std::vector<Eigen::VectorXd> biases;

  static SmallMlp random(std::vector<int> widths, std::uint64_t seed);
  Eigen::Index parameter_count() const;
  Eigen::VectorXd flat() const;
  void assign(const Eigen::VectorXd& theta);
  Eigen::VectorXd probabilities(const Eigen::VectorXd& x) const;
};

class MlpMap final : public ParametricMap {
 public:
  MlpMap(SmallMlp net, Eigen::VectorXd x) : net_(std::move(net)), x_(std::move(x)) {}
  Eigen::Index parameter_count() const override { return net_.parameter_count(); }
  Eigen::VectorXd parameters() const override { return net_.flat(); }
  Eigen::VectorXd evaluate(const Eigen::VectorXd& theta) const override;

 private:
  SmallMlp net_;
  Eigen::VectorXd x_;
};

struct SensitivityEstimate {
  double value = 0.0;
  double sigma = 0.0;
  int n_draws = 0;
  double std_error = 0.0;
};

/// Monte-Carlo sensitivity: mean of ||f(theta + xi) - f(theta)||^2 / sigma^2
/// over xi ~ N(0, sigma^2 I), on raw outputs. Without sigma, uses
/// 1e-3 * parameter_scale(); an explicit sigma <= 0 is a ValidationError.
SensitivityEstimate mc_sensitivity(const ParametricMap& map, std::optional<double> sigma, int n_draws,
                                   std::uint64_t seed);

inline constexpr Eigen::Index kFdParameterCap = 50'000;

/// Central finite differences per parameter: sum_i ||(f(theta + h e_i) - f(theta - h e_i)) / 2h||^2.
/// Without h, uses 1e-4 * parameter_scale(). Throws ValidationError above `cap` parameters.
double fd_sensitivity_oracle(const ParametricMap& map, std::optional<double> h = std::nullopt,
                             Eigen::Index cap = kFdParameterCap);

struct DifferentialSensitivityConfig {
  int n_components = 4;
  double radius = 3.0;
  double component_std = 0.35;
  int n_train = 512;
  int n_eval = 200;
  int hidden = 16;
  int train_steps = 1500;
  double learning_rate = 0.02;
  int mc_draws = 64;
  int bootstrap = 1000;
};

struct DifferentialSensitivityReport {
  double mean_sen_id = 0.0;
  double mean_sen_ood = 0.0;
  double bootstrap_fraction = 0.0;
  double final_train_loss = 0.0;
  bool control = false;
  std::vector<double> sen_id;
  std::vector<double> sen_ood;
};

/// Trains a small classifier on a 2-D Gaussian mixture (the training
/// distribution) and compares its sensitivity on held-out training-distribution
/// points against a mixture rotated halfway between the training components.
/// With `control`, the comparison set is the held-out set itself.
DifferentialSensitivityReport differential_sensitivity_check(std::uint64_t seed, bool control = false,
                                                             const DifferentialSensitivityConfig& config = {});

/// Conjugate Gaussian-mean posterior variance (1/prior_var + N/noise_var)^-1 per N.
std::vector<double> posterior_variance_demo(std::span<const int> n_values, double noise_var = 1.0,
                                            double prior_var = 1.0);

}  // namespace wepe
