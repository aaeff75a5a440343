#include "mdnik/reference.hpp"

#include <cmath>
#include <vector>

#include "mdnik/errors.hpp"

namespace mdnik::reference {

namespace {

using Vec = std::vector<double>;

double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

// y = W x + b with W stored column-major (Eigen's layout).
Vec affine(const DenseLayer& l, const Vec& x) {
    const auto rows = static_cast<std::size_t>(l.weight.rows());
    const auto cols = static_cast<std::size_t>(l.weight.cols());
    Vec y(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        double acc = l.bias[static_cast<Eigen::Index>(r)];
        for (std::size_t c = 0; c < cols; ++c) acc += l.weight(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) * x[c];
        y[r] = acc;
    }
    return y;
}

// grad_W += delta x^T, grad_b += delta; returns W^T delta.
Vec accumulate(const DenseLayer& l, DenseLayer& g, const Vec& delta, const Vec& x) {
    const auto rows = static_cast<std::size_t>(l.weight.rows());
    const auto cols = static_cast<std::size_t>(l.weight.cols());
    Vec back(cols, 0.0);
    for (std::size_t r = 0; r < rows; ++r) {
        const auto ri = static_cast<Eigen::Index>(r);
        g.bias[ri] += delta[r];
        for (std::size_t c = 0; c < cols; ++c) {
            const auto ci = static_cast<Eigen::Index>(c);
            g.weight(ri, ci) += delta[r] * x[c];
            back[c] += l.weight(ri, ci) * delta[r];
        }
    }
    return back;
}

}  // namespace

BatchGradient batch_gradient(const MdnModel& model, const Eigen::MatrixXd& inputs, const Eigen::MatrixXd& targets) {
    const Eigen::Index n = inputs.cols();
    if (n == 0) throw ValidationError("empty batch");
    const auto& P = model.params;
    const auto k = static_cast<std::size_t>(model.components());
    const auto d = static_cast<std::size_t>(model.dof());
    const double log2pi = std::log(2.0 * 3.14159265358979323846);

    BatchGradient out{MdnParameters::zeros_like(P), 0.0};
    for (Eigen::Index j = 0; j < n; ++j) {
        std::vector<Vec> acts{Vec(inputs.col(j).data(), inputs.col(j).data() + inputs.rows())};
        std::vector<Vec> pre;
        for (const auto& layer : P.trunk) {
            pre.push_back(affine(layer, acts.back()));
            Vec a(pre.back().size());
            for (std::size_t i = 0; i < a.size(); ++i) a[i] = pre.back()[i] * sigmoid(pre.back()[i]);
            acts.push_back(std::move(a));
        }
        const Vec& h = acts.back();
        const Vec logits = affine(P.logits, h);
        const Vec mu = affine(P.means, h);
        const Vec s = affine(P.deviations, h);

        double lmax = logits[0];
        for (double v : logits) lmax = std::max(lmax, v);
        double z = 0.0;
        for (double v : logits) z += std::exp(v - lmax);
        Vec pi(k), log_comp(k), sigma(k * d);
        for (std::size_t c = 0; c < k; ++c) {
            pi[c] = std::exp(logits[c] - lmax) / z;
            double lp = std::log(pi[c]);
            for (std::size_t i = 0; i < d; ++i) {
                sigma[c * d + i] = std::log1p(std::exp(s[c * d + i])) + kSigmaFloor;
                const double r = (targets(static_cast<Eigen::Index>(i), j) - mu[c * d + i]) / sigma[c * d + i];
                lp += -0.5 * log2pi - std::log(sigma[c * d + i]) - 0.5 * r * r;
            }
            log_comp[c] = lp;
        }
        double cmax = log_comp[0];
        for (double v : log_comp) cmax = std::max(cmax, v);
        double total = 0.0;
        for (double v : log_comp) total += std::exp(v - cmax);
        const double lse = cmax + std::log(total);
        out.loss += -lse;

        Vec d_logits(k), d_mu(k * d), d_s(k * d);
        for (std::size_t c = 0; c < k; ++c) {
            const double gamma = std::exp(log_comp[c] - lse);
            d_logits[c] = pi[c] - gamma;
            for (std::size_t i = 0; i < d; ++i) {
                const double sg = sigma[c * d + i];
                const double diff = targets(static_cast<Eigen::Index>(i), j) - mu[c * d + i];
                d_mu[c * d + i] = -gamma * diff / (sg * sg);
                d_s[c * d + i] = gamma * (1.0 / sg - diff * diff / (sg * sg * sg)) * sigmoid(s[c * d + i]);
            }
        }
        Vec d_h = accumulate(P.logits, out.grad.logits, d_logits, h);
        const Vec from_mu = accumulate(P.means, out.grad.means, d_mu, h);
        const Vec from_s = accumulate(P.deviations, out.grad.deviations, d_s, h);
        for (std::size_t i = 0; i < d_h.size(); ++i) d_h[i] += from_mu[i] + from_s[i];

        for (std::size_t l = P.trunk.size(); l-- > 0;) {
            Vec d_z(d_h.size());
            for (std::size_t i = 0; i < d_z.size(); ++i) {
                const double sg = sigmoid(pre[l][i]);
                d_z[i] = d_h[i] * sg * (1.0 + pre[l][i] * (1.0 - sg));
            }
            d_h = accumulate(P.trunk[l], out.grad.trunk[l], d_z, acts[l]);
        }
    }
    const double inv_n = 1.0 / static_cast<double>(n);
    out.loss *= inv_n;
    for (auto t : out.grad.tensors())
        for (double& v : t) v *= inv_n;
    return out;
}

Eigen::Matrix3Xd forward_positions(const KinematicChain& chain, const Eigen::MatrixXd& configs) {
    Eigen::Matrix3Xd out(3, configs.cols());
    for (Eigen::Index i = 0; i < configs.cols(); ++i) out.col(i) = forward_kinematics(chain, configs.col(i)).translation;
    return out;
}

}  // namespace mdnik::reference
