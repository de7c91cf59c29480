#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "forenvit/heads/heads.hpp"
#include "forenvit/numerics/optimizer.hpp"

namespace forenvit {

/// Row-major sample matrix with binary labels.
struct FeatureMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> values;
  std::vector<int> labels;

  FeatureMatrix() = default;
  FeatureMatrix(std::size_t r, std::size_t c, std::vector<double> v, std::vector<int> l)
      : rows(r), cols(c), values(std::move(v)), labels(std::move(l)) {
    validate();
  }

  void validate() const {
    if (values.size() != rows * cols) throw ShapeError("feature matrix: value count does not match rows x cols");
    if (labels.size() != rows) throw ShapeError("feature matrix: one label per row required");
    for (double v : values)
      if (!std::isfinite(v)) throw InvalidValueError("feature matrix contains a non-finite entry");
    for (int l : labels)
      if (l != 0 && l != 1) throw ContractError("feature labels must be 0 or 1");
  }

  std::span<const double> row(std::size_t i) const { return {values.data() + i * cols, cols}; }
};

// ---- PCA + k-means ----------------------------------------------------------

struct PcaModel {
  std::vector<double> mean;        // cols
  std::vector<double> components;  // cols x n, column j = j-th principal axis
  std::vector<double> variances;   // n, descending
  std::size_t input_dim = 0;
  std::size_t n_components = 0;
};

inline std::size_t default_pca_components(std::size_t cols) { return std::min<std::size_t>(32, cols); }

/// Principal axes from the eigendecomposition of the sample covariance.
inline PcaModel pca_fit(const FeatureMatrix& x, std::size_t n_components) {
  if (n_components == 0 || n_components > std::min(x.rows, x.cols))
    throw ConfigError("pca: n_components " + std::to_string(n_components) + " must lie in 1.." +
                      std::to_string(std::min(x.rows, x.cols)));
  using Mat = Eigen::MatrixXd;
  Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> m(x.values.data(), x.rows,
                                                                                             x.cols);
  const Eigen::RowVectorXd mu = m.colwise().mean();
  const Mat centered = m.rowwise() - mu;
  const Mat cov = (centered.transpose() * centered) / static_cast<double>(std::max<std::size_t>(1, x.rows - 1));
  if (cov.trace() <= 1e-12 * std::max(1.0, mu.squaredNorm()))
    throw DegenerateDataError("pca: features have no variance (all rows identical)");
  Eigen::SelfAdjointEigenSolver<Mat> eig(cov);
  if (eig.info() != Eigen::Success) throw NumericError("pca: eigendecomposition failed");
  PcaModel p;
  p.input_dim = x.cols;
  p.n_components = n_components;
  p.mean.assign(mu.data(), mu.data() + x.cols);
  p.components.resize(x.cols * n_components);
  for (std::size_t j = 0; j < n_components; ++j) {
    const auto col = static_cast<Eigen::Index>(x.cols - 1 - j);  // eigenvalues ascend
    Eigen::VectorXd v = eig.eigenvectors().col(col);
    // Sign convention: largest-magnitude entry positive.
    Eigen::Index arg;
    v.cwiseAbs().maxCoeff(&arg);
    if (v(arg) < 0) v = -v;
    for (std::size_t i = 0; i < x.cols; ++i) p.components[i * n_components + j] = v(static_cast<Eigen::Index>(i));
    p.variances.push_back(eig.eigenvalues()(col));
  }
  return p;
}

inline FeatureMatrix pca_project(const PcaModel& p, const FeatureMatrix& x) {
  if (x.cols != p.input_dim) throw ShapeError("pca: input has " + std::to_string(x.cols) + " columns, model expects " +
                                              std::to_string(p.input_dim));
  const std::size_t n = p.n_components;
  std::vector<double> out(x.rows * n, 0.0);
  for (std::size_t r = 0; r < x.rows; ++r)
    for (std::size_t i = 0; i < x.cols; ++i) {
      const double c = x.values[r * x.cols + i] - p.mean[i];
      for (std::size_t j = 0; j < n; ++j) out[r * n + j] += c * p.components[i * n + j];
    }
  return {x.rows, n, std::move(out), x.labels};
}

inline double squared_distance(std::span<const double> a, std::span<const double> b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return s;
}

struct KMeansResult {
  std::size_t clusters = 0;
  std::size_t dim = 0;
  std::vector<double> centroids;         // clusters x dim
  std::vector<std::size_t> assignment;   // per row
  std::vector<double> objective;         // within-cluster sum of squares after each iteration
};

/// Lloyd iterations from a seeded k-means++ initialisation.
inline KMeansResult kmeans(const FeatureMatrix& x, std::size_t clusters, Rng rng, std::size_t max_iter = 100) {
  if (clusters == 0 || clusters > x.rows) throw ConfigError("kmeans: cluster count must lie in 1..rows");
  KMeansResult r;
  r.clusters = clusters;
  r.dim = x.cols;
  r.centroids.reserve(clusters * x.cols);
  auto add_centroid = [&](std::size_t row) {
    const auto v = x.row(row);
    r.centroids.insert(r.centroids.end(), v.begin(), v.end());
  };
  add_centroid(rng.below(x.rows));
  std::vector<double> d2(x.rows, std::numeric_limits<double>::infinity());
  for (std::size_t c = 1; c < clusters; ++c) {
    const std::span<const double> last(r.centroids.data() + (c - 1) * x.cols, x.cols);
    double total = 0;
    for (std::size_t i = 0; i < x.rows; ++i) total += (d2[i] = std::min(d2[i], squared_distance(x.row(i), last)));
    std::size_t pick = 0;
    if (total > 0) {
      double u = rng.uniform() * total;
      for (pick = 0; pick + 1 < x.rows; ++pick)
        if ((u -= d2[pick]) < 0) break;
    } else {
      pick = rng.below(x.rows);
    }
    add_centroid(pick);
  }

  auto centroid = [&](std::size_t c) { return std::span<const double>(r.centroids.data() + c * x.cols, x.cols); };
  r.assignment.assign(x.rows, 0);
  for (std::size_t it = 0; it < max_iter; ++it) {
    bool changed = it == 0;
    double obj = 0;
    for (std::size_t i = 0; i < x.rows; ++i) {
      std::size_t best = 0;
      double bd = squared_distance(x.row(i), centroid(0));
      for (std::size_t c = 1; c < clusters; ++c) {
        const double d = squared_distance(x.row(i), centroid(c));
        if (d < bd) bd = d, best = c;
      }
      changed |= best != r.assignment[i];
      r.assignment[i] = best;
      obj += bd;
    }
    r.objective.push_back(obj);
    if (!changed) break;
    std::vector<double> sum(clusters * x.cols, 0.0);
    std::vector<std::size_t> n(clusters, 0);
    for (std::size_t i = 0; i < x.rows; ++i) {
      ++n[r.assignment[i]];
      const auto v = x.row(i);
      for (std::size_t j = 0; j < x.cols; ++j) sum[r.assignment[i] * x.cols + j] += v[j];
    }
    for (std::size_t c = 0; c < clusters; ++c)
      if (n[c] > 0)  // empty clusters keep their centroid
        for (std::size_t j = 0; j < x.cols; ++j) r.centroids[c * x.cols + j] = sum[c * x.cols + j] / n[c];
  }
  return r;
}

struct PcaKMeansProbe {
  PcaModel pca;
  KMeansResult clusters;
  std::vector<int> cluster_label;

  static PcaKMeansProbe fit(const FeatureMatrix& train, Rng rng, std::size_t n_components = 0) {
    PcaKMeansProbe p;
    p.pca = pca_fit(train, n_components == 0 ? default_pca_components(std::min(train.rows, train.cols)) : n_components);
    const auto z = pca_project(p.pca, train);
    p.clusters = kmeans(z, 2, rng.derive("kmeans"));
    // Majority vote of training labels inside each cluster.
    std::vector<std::array<std::size_t, 2>> votes(2, {0, 0});
    for (std::size_t i = 0; i < z.rows; ++i) ++votes[p.clusters.assignment[i]][static_cast<std::size_t>(train.labels[i])];
    p.cluster_label.resize(2);
    for (std::size_t c = 0; c < 2; ++c) p.cluster_label[c] = votes[c][1] > votes[c][0] ? 1 : 0;
    return p;
  }

  int predict(std::span<const double> row) const {
    FeatureMatrix one(1, row.size(), {row.begin(), row.end()}, {0});
    const auto z = pca_project(pca, one);
    const double d0 = squared_distance(z.row(0), {clusters.centroids.data(), clusters.dim});
    const double d1 = squared_distance(z.row(0), {clusters.centroids.data() + clusters.dim, clusters.dim});
    return cluster_label[d1 < d0 ? 1 : 0];
  }
};

// ---- k-NN -------------------------------------------------------------------

inline constexpr std::size_t kDefaultNeighbors = 5;

/// Majority vote of the k nearest training rows (Euclidean). A tied vote goes
/// to the class whose nearest neighbour is closer, then to label 0.
inline int knn_classify(const FeatureMatrix& train, std::span<const double> query, std::size_t k = kDefaultNeighbors) {
  if (train.rows == 0) throw ContractError("knn: empty training set");
  if (k == 0 || k > train.rows) throw ConfigError("knn: k_neighbors must lie in 1.." + std::to_string(train.rows));
  if (query.size() != train.cols) throw ShapeError("knn: query dimension does not match training features");
  std::vector<std::pair<double, int>> d(train.rows);
  for (std::size_t i = 0; i < train.rows; ++i) d[i] = {squared_distance(train.row(i), query), train.labels[i]};
  std::partial_sort(d.begin(), d.begin() + static_cast<std::ptrdiff_t>(k), d.end());
  std::array<std::size_t, 2> votes{0, 0};
  std::array<double, 2> nearest{std::numeric_limits<double>::infinity(), std::numeric_limits<double>::infinity()};
  for (std::size_t i = 0; i < k; ++i) {
    ++votes[static_cast<std::size_t>(d[i].second)];
    nearest[static_cast<std::size_t>(d[i].second)] = std::min(nearest[static_cast<std::size_t>(d[i].second)], d[i].first);
  }
  if (votes[0] != votes[1]) return votes[1] > votes[0] ? 1 : 0;
  return nearest[1] < nearest[0] ? 1 : 0;
}

// ---- trained probes -------------------------------------------------------

struct ProbeHyper {
  std::size_t epochs = 200;
  std::size_t batch_size = 64;
  std::size_t hidden = 0;  // mlp2 only, 0 -> input/2
  OptimizerConfig optimizer{1e-2, 1e-4};
};

/// Per-column z-scoring fitted on training features.
struct Standardizer {
  std::vector<double> mean, scale;

  static Standardizer fit(const FeatureMatrix& x) {
    Standardizer s;
    s.mean.assign(x.cols, 0.0);
    s.scale.assign(x.cols, 1.0);
    for (std::size_t r = 0; r < x.rows; ++r)
      for (std::size_t c = 0; c < x.cols; ++c) s.mean[c] += x.values[r * x.cols + c] / x.rows;
    for (std::size_t c = 0; c < x.cols; ++c) {
      double v = 0;
      for (std::size_t r = 0; r < x.rows; ++r) v += std::pow(x.values[r * x.cols + c] - s.mean[c], 2) / x.rows;
      s.scale[c] = v > 1e-12 ? 1.0 / std::sqrt(v) : 1.0;
    }
    return s;
  }

  std::vector<double> apply(std::span<const double> values, std::size_t cols) const {
    std::vector<double> out(values.begin(), values.end());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = (out[i] - mean[i % cols]) * scale[i % cols];
    return out;
  }
};

struct TrainedProbe {
  Standardizer standardizer;
  ClassifierHead<double> head;

  static TrainedProbe fit(const FeatureMatrix& train, HeadKind kind, const ProbeHyper& hyper, Rng rng) {
    train.validate();
    if (train.rows == 0) throw DataError("probe: empty training set");
    TrainedProbe p;
    p.standardizer = Standardizer::fit(train);
    auto init = rng.derive("init");
    p.head = ClassifierHead<double>::create(kind, train.cols, hyper.hidden, init);
    const auto z = p.standardizer.apply(train.values, train.cols);
    NamedParameters<double> params;
    p.head.add_parameters(params, "probe/classifier.");
    OptimizerState opt;
    opt.config = hyper.optimizer;
    auto order_rng = rng.derive("order");
    std::vector<std::size_t> order(train.rows);
    std::iota(order.begin(), order.end(), 0);
    const std::size_t bs = std::max<std::size_t>(1, hyper.batch_size);
    for (std::size_t e = 0; e < hyper.epochs; ++e) {
      order_rng.shuffle(order);
      for (std::size_t start = 0; start < train.rows; start += bs) {
        const std::size_t n = std::min(bs, train.rows - start);
        std::vector<double> xb(n * train.cols);
        std::vector<int> yb(n);
        for (std::size_t i = 0; i < n; ++i) {
          const auto r = order[start + i];
          std::copy_n(z.begin() + static_cast<std::ptrdiff_t>(r * train.cols), train.cols, xb.begin() + i * train.cols);
          yb[i] = train.labels[r];
        }
        backward(ops::bce_with_logits(p.head.logits(Tensor<double>({n, train.cols}, std::move(xb))), yb));
        optimizer_step(params, opt);
      }
    }
    return p;
  }

  /// sigmoid scores, one per row
  std::vector<double> scores(const FeatureMatrix& x) const {
    if (x.rows == 0) return {};
    const auto logits = head.logits(Tensor<double>({x.rows, x.cols}, standardizer.apply(x.values, x.cols)));
    std::vector<double> s(x.rows);
    for (std::size_t i = 0; i < x.rows; ++i) s[i] = sigmoid(logits[i]);
    return s;
  }
};

// ---- serialization under "probe/" ------------------------------------------

namespace detail {

inline Tensor<float> float_tensor(Shape shape, std::span<const double> v) {
  return Tensor<float>(std::move(shape), std::vector<float>(v.begin(), v.end()));
}

inline std::vector<double> doubles(const NamedParameters<float>& p, const std::string& name) {
  auto it = p.find(name);
  if (it == p.end()) throw CheckpointError("probe checkpoint is missing " + name);
  return {it->second.data().begin(), it->second.data().end()};
}

}  // namespace detail

inline NamedParameters<float> probe_parameters(const TrainedProbe& p) {
  NamedParameters<float> out;
  const std::size_t d = p.standardizer.mean.size();
  out["probe/standardize.mean"] = detail::float_tensor({d}, p.standardizer.mean);
  out["probe/standardize.scale"] = detail::float_tensor({d}, p.standardizer.scale);
  NamedParameters<double> h;
  p.head.add_parameters(h, "probe/classifier.");
  for (auto& [n, t] : h) out[n] = detail::float_tensor(t.shape(), t.data());
  return out;
}

inline NamedParameters<float> probe_parameters(const PcaKMeansProbe& p) {
  NamedParameters<float> out;
  out["probe/pca.mean"] = detail::float_tensor({p.pca.input_dim}, p.pca.mean);
  out["probe/pca.components"] = detail::float_tensor({p.pca.input_dim, p.pca.n_components}, p.pca.components);
  out["probe/kmeans.centroids"] = detail::float_tensor({2, p.clusters.dim}, p.clusters.centroids);
  const std::vector<double> labels(p.cluster_label.begin(), p.cluster_label.end());
  out["probe/kmeans.labels"] = detail::float_tensor({2}, labels);
  return out;
}

inline NamedParameters<float> probe_parameters(const FeatureMatrix& knn_train) {
  NamedParameters<float> out;
  out["probe/knn.features"] = detail::float_tensor({knn_train.rows, knn_train.cols}, knn_train.values);
  const std::vector<double> labels(knn_train.labels.begin(), knn_train.labels.end());
  out["probe/knn.labels"] = detail::float_tensor({knn_train.rows}, labels);
  return out;
}

inline TrainedProbe trained_probe_from(const NamedParameters<float>& p, HeadKind kind) {
  TrainedProbe t;
  t.standardizer.mean = detail::doubles(p, "probe/standardize.mean");
  t.standardizer.scale = detail::doubles(p, "probe/standardize.scale");
  const std::size_t in = t.standardizer.mean.size();
  t.head.kind = kind;
  t.head.input_dim = in;
  auto take = [&](const std::string& n) {
    auto it = p.find(n);
    if (it == p.end()) throw CheckpointError("probe checkpoint is missing " + n);
    return Tensor<double>::parameter(it->second.shape(), detail::doubles(p, n));
  };
  t.head.w1 = take("probe/classifier.fc1.weight");
  t.head.b1 = take("probe/classifier.fc1.bias");
  if (kind == HeadKind::mlp2) {
    t.head.w2 = take("probe/classifier.fc2.weight");
    t.head.b2 = take("probe/classifier.fc2.bias");
    t.head.hidden_dim = t.head.w1.dim(1);
  }
  return t;
}

}  // namespace forenvit
