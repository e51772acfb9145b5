#pragma once

// Inception score and Frechet distance over a pluggable feature backend. The reference
// backend is a small MLP classifier trained on synthetic scenes, so absolute values are
// only comparable between runs that use the same backend.

#include "segedit/error.hpp"
#include "segedit/image.hpp"
#include "segedit/synth.hpp"

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include <array>
#include <cmath>
#include <limits>
#include <random>
#include <string>
#include <vector>

namespace segedit {

using FeatureSet = Eigen::MatrixXd; // one row per sample

inline void validate_probabilities(FeatureSet const& p) {
    if (p.rows() < 1 || p.cols() < 1) throw Error(ErrorKind::parameter, "probability matrix is empty");
    for (Eigen::Index i = 0; i < p.rows(); ++i) {
        double s = 0;
        for (Eigen::Index j = 0; j < p.cols(); ++j) {
            double v = p(i, j);
            if (!std::isfinite(v) || v < 0) throw Error(ErrorKind::parameter, "probabilities must be finite and non-negative");
            s += v;
        }
        if (std::abs(s - 1.0) > 1e-6) throw Error(ErrorKind::parameter, "probability row " + std::to_string(i) + " does not sum to 1");
    }
}

/// exp(mean_i KL(p_i || p_bar)).
inline double inception_score(FeatureSet const& probs) {
    validate_probabilities(probs);
    double const n = static_cast<double>(probs.rows());
    Eigen::RowVectorXd colsum = probs.colwise().sum();
    // p / p_bar written as p * n / colsum stays exact for one-hot rows; Neumaier summation.
    double kl_sum = 0, carry = 0;
    for (Eigen::Index i = 0; i < probs.rows(); ++i)
        for (Eigen::Index j = 0; j < probs.cols(); ++j) {
            double p = probs(i, j);
            if (p <= 0) continue;
            double term = p * std::log(p * n / colsum(j));
            double t = kl_sum + term;
            carry += std::abs(kl_sum) >= std::abs(term) ? (kl_sum - t) + term : (term - t) + kl_sum;
            kl_sum = t;
        }
    double is = std::exp((kl_sum + carry) / n);
    // Balanced one-hot input scores exactly k; exp(log k) alone is off by a few ulps.
    double k = std::round(is);
    return std::abs(is - k) <= 16 * std::numeric_limits<double>::epsilon() * k ? k : is;
}

struct Moments {
    Eigen::VectorXd mean;
    Eigen::MatrixXd cov;
};

/// Sample mean and unbiased covariance (zero covariance for a single row).
inline Moments moments(FeatureSet const& x) {
    if (x.rows() < 1) throw Error(ErrorKind::parameter, "feature set is empty");
    if (!x.allFinite()) throw Error(ErrorKind::numeric, "features contain non-finite values");
    Moments m;
    m.mean = x.colwise().mean().transpose();
    Eigen::MatrixXd centered = x.rowwise() - m.mean.transpose();
    m.cov = x.rows() > 1 ? Eigen::MatrixXd(centered.transpose() * centered / static_cast<double>(x.rows() - 1))
                         : Eigen::MatrixXd::Zero(x.cols(), x.cols());
    return m;
}

namespace detail {

/// Symmetric PSD square root with negative eigenvalues clamped to zero.
inline Eigen::MatrixXd psd_sqrt(Eigen::MatrixXd const& a) {
    Eigen::MatrixXd sym = 0.5 * (a + a.transpose());
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(sym);
    Eigen::VectorXd ev = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
    return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

} // namespace detail

/// ||mu1 - mu2||^2 + Tr(S1 + S2 - 2 (S1 S2)^(1/2)). The trace of the product's root is
/// taken from the symmetrized form S1^(1/2) S2 S1^(1/2). `eps` adds eps * I to both
/// covariances.
inline double frechet_distance(Moments const& a, Moments const& b, double eps = 0.0) {
    if (a.mean.size() != b.mean.size()) throw Error(ErrorKind::shape, "feature dimensions differ");
    Eigen::Index d = a.mean.size();
    Eigen::MatrixXd s1 = a.cov + eps * Eigen::MatrixXd::Identity(d, d);
    Eigen::MatrixXd s2 = b.cov + eps * Eigen::MatrixXd::Identity(d, d);
    Eigen::MatrixXd r1 = detail::psd_sqrt(s1);
    Eigen::MatrixXd mid = r1 * s2 * r1;
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (mid + mid.transpose()), Eigen::EigenvaluesOnly);
    double tr_root = es.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
    double fid = (a.mean - b.mean).squaredNorm() + s1.trace() + s2.trace() - 2.0 * tr_root;
    if (!std::isfinite(fid)) throw Error(ErrorKind::numeric, "Frechet distance is not finite");
    return std::max(fid, 0.0);
}

/// Regularizes with 1e-6 * I when either set has too few rows for a full-rank covariance.
inline double frechet_distance(FeatureSet const& a, FeatureSet const& b) {
    if (a.cols() != b.cols()) throw Error(ErrorKind::shape, "feature dimensions differ");
    double eps = (a.rows() <= a.cols() || b.rows() <= b.cols()) ? 1e-6 : 0.0;
    return frechet_distance(moments(a), moments(b), eps);
}

// ---------------------------------------------------------------- feature backends

class FeatureBackend {
  public:
    virtual ~FeatureBackend() = default;
    virtual Eigen::VectorXd features(ImageBuffer const& image) const = 0;
    virtual Eigen::VectorXd probabilities(ImageBuffer const& image) const = 0;
    virtual std::string name() const = 0;
};

inline FeatureSet extract_features(std::vector<ImageBuffer> const& images, FeatureBackend const& backend) {
    if (images.empty()) throw Error(ErrorKind::parameter, "no images to featurize");
    FeatureSet out;
    for (size_t i = 0; i < images.size(); ++i) {
        if (!images[i].same_shape(images[0])) throw Error(ErrorKind::shape, "images differ in size");
        Eigen::VectorXd f;
        try {
            f = backend.features(images[i]);
        } catch (Error const& e) {
            throw Error(ErrorKind::backend, "feature backend failed: " + std::string(e.what()));
        }
        if (i == 0) out.resize(static_cast<Eigen::Index>(images.size()), f.size());
        if (f.size() != out.cols()) throw Error(ErrorKind::backend, "feature backend returned inconsistent dimensions");
        out.row(static_cast<Eigen::Index>(i)) = f.transpose();
    }
    return out;
}

inline FeatureSet extract_probabilities(std::vector<ImageBuffer> const& images, FeatureBackend const& backend) {
    if (images.empty()) throw Error(ErrorKind::parameter, "no images to classify");
    FeatureSet out;
    for (size_t i = 0; i < images.size(); ++i) {
        auto p = backend.probabilities(images[i]);
        if (i == 0) out.resize(static_cast<Eigen::Index>(images.size()), p.size());
        out.row(static_cast<Eigen::Index>(i)) = p.transpose();
    }
    return out;
}

/// One-hidden-layer MLP over a 16x16 thumbnail. Classes are (shape, color) of the
/// scene's first object; features are the tanh hidden layer.
class ToyClassifier final : public FeatureBackend {
  public:
    static constexpr int thumb = 16;
    static constexpr int hidden = 32;

    static int label_of(synth::SynthSample const& s) {
        auto const& o = s.objects.front();
        return (synth::class_id(o.shape) - 1) * static_cast<int>(synth::palette_colors.size()) + o.color;
    }
    static int class_count() { return 3 * static_cast<int>(synth::palette_colors.size()); }

    static Eigen::VectorXd input_vector(ImageBuffer const& image) {
        auto small = resize_image(image, thumb, thumb, ResizeMethod::bilinear);
        Eigen::VectorXd v(small.size());
        for (size_t i = 0; i < small.size(); ++i) v(static_cast<Eigen::Index>(i)) = small.data()[i] - 0.5;
        return v;
    }

    /// Full-batch Adam on cross-entropy; deterministic for a given seed.
    static ToyClassifier train(std::vector<synth::SynthSample> const& data, uint64_t seed, int iterations = 300) {
        if (data.empty()) throw Error(ErrorKind::parameter, "classifier needs training data");
        int n = static_cast<int>(data.size()), k = class_count();
        Eigen::MatrixXd x(n, thumb * thumb * 3);
        std::vector<int> y(n);
        for (int i = 0; i < n; ++i) {
            x.row(i) = input_vector(data[i].image).transpose();
            y[i] = label_of(data[i]);
        }
        ToyClassifier c;
        std::mt19937_64 rng(seed);
        std::normal_distribution<double> nd(0.0, 1.0);
        c.w1_ = Eigen::MatrixXd::NullaryExpr(x.cols(), hidden, [&] { return nd(rng) / std::sqrt(static_cast<double>(x.cols())); });
        c.b1_ = Eigen::RowVectorXd::Zero(hidden);
        c.w2_ = Eigen::MatrixXd::NullaryExpr(hidden, k, [&] { return nd(rng) / std::sqrt(static_cast<double>(hidden)); });
        c.b2_ = Eigen::RowVectorXd::Zero(k);

        struct Slot {
            Eigen::MatrixXd m, v;
        };
        std::array<Slot, 4> slots;
        auto init = [](Slot& s, Eigen::Index r, Eigen::Index cc) { s.m = s.v = Eigen::MatrixXd::Zero(r, cc); };
        init(slots[0], c.w1_.rows(), c.w1_.cols());
        init(slots[1], 1, hidden);
        init(slots[2], hidden, k);
        init(slots[3], 1, k);
        double const lr = 0.01, b1 = 0.9, b2 = 0.999;
        auto adam = [&](Eigen::MatrixXd& w, Eigen::MatrixXd const& g, Slot& s, int t) {
            s.m = b1 * s.m + (1 - b1) * g;
            s.v = b2 * s.v + (1 - b2) * g.cwiseProduct(g);
            Eigen::MatrixXd mh = s.m / (1 - std::pow(b1, t)), vh = s.v / (1 - std::pow(b2, t));
            w -= lr * mh.cwiseQuotient((vh.cwiseSqrt().array() + 1e-8).matrix());
        };
        for (int it = 1; it <= iterations; ++it) {
            Eigen::MatrixXd h = ((x * c.w1_).rowwise() + c.b1_).array().tanh().matrix();
            Eigen::MatrixXd logits = (h * c.w2_).rowwise() + c.b2_;
            Eigen::MatrixXd p = softmax(logits);
            Eigen::MatrixXd dl = p;
            for (int i = 0; i < n; ++i) dl(i, y[i]) -= 1.0;
            dl /= n;
            Eigen::MatrixXd gw2 = h.transpose() * dl;
            Eigen::MatrixXd gb2 = dl.colwise().sum();
            Eigen::MatrixXd dh = (dl * c.w2_.transpose()).cwiseProduct((1.0 - h.array().square()).matrix());
            Eigen::MatrixXd gw1 = x.transpose() * dh;
            Eigen::MatrixXd gb1 = dh.colwise().sum();
            Eigen::MatrixXd b1m = c.b1_, b2m = c.b2_;
            adam(c.w1_, gw1, slots[0], it);
            adam(b1m, gb1, slots[1], it);
            adam(c.w2_, gw2, slots[2], it);
            adam(b2m, gb2, slots[3], it);
            c.b1_ = b1m;
            c.b2_ = b2m;
        }
        return c;
    }

    Eigen::VectorXd features(ImageBuffer const& image) const override {
        Eigen::RowVectorXd h = (input_vector(image).transpose() * w1_ + b1_).array().tanh().matrix();
        return h.transpose();
    }

    Eigen::VectorXd probabilities(ImageBuffer const& image) const override {
        Eigen::MatrixXd logits = features(image).transpose() * w2_ + b2_;
        return softmax(logits).row(0).transpose();
    }

    int predict(ImageBuffer const& image) const {
        Eigen::Index best;
        probabilities(image).maxCoeff(&best);
        return static_cast<int>(best);
    }

    std::string name() const override { return "toy-classifier"; }

  private:
    static Eigen::MatrixXd softmax(Eigen::MatrixXd const& logits) {
        Eigen::MatrixXd p = logits.colwise() - logits.rowwise().maxCoeff();
        p = p.array().exp().matrix();
        Eigen::VectorXd s = p.rowwise().sum();
        for (Eigen::Index i = 0; i < p.rows(); ++i) p.row(i) /= s(i);
        return p;
    }

    Eigen::MatrixXd w1_, w2_;
    Eigen::RowVectorXd b1_, b2_;
};

inline nlohmann::json metric_report(std::string const& metric, double value, size_t n, std::string const& backend, uint64_t seed) {
    return {{"metric", metric}, {"value", value}, {"n", n}, {"backend", backend}, {"seed", seed}};
}

} // namespace segedit
