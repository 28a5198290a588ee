#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "caga/tensor.hpp"

// Independent reference implementations for self-tests and the test suite.
// Everything here is written as plain loops, deliberately sharing no code
// with the kernels it checks.

namespace caga::oracles {

// c[i,j] = sum_k a[i,k] * b[k,j], three explicit loops.
inline Tensor<double> matmul_ref(const Tensor<double>& a, const Tensor<double>& b) {
    const std::size_t M = a.extent(0), K = a.extent(1), N = b.extent(1);
    Tensor<double> c = Tensor<double>::zeros({M, N});
    for (std::size_t i = 0; i < M; ++i)
        for (std::size_t j = 0; j < N; ++j) {
            double acc = 0;
            for (std::size_t k = 0; k < K; ++k)
                acc += a.at({i, k}) * b.at({k, j});
            c.at({i, j}) = acc;
        }
    return c;
}

// Direct-sum valid-mode dilated cross-correlation. Every multiply bumps
// *mac_counter when given, so MAC formulas can be checked against the loop
// count.
inline Tensor<double> conv2d_ref(const Tensor<double>& x, const Tensor<double>& w,
                                 const std::vector<double>& bias, int dilation, int stride,
                                 long long* mac_counter = nullptr) {
    const std::size_t Cin = x.extent(0), H = x.extent(1), W = x.extent(2);
    const std::size_t Cout = w.extent(0), k = w.extent(2);
    const std::size_t keff = k + (k - 1) * (static_cast<std::size_t>(dilation) - 1);
    const std::size_t OH = (H - keff) / static_cast<std::size_t>(stride) + 1;
    const std::size_t OW = (W - keff) / static_cast<std::size_t>(stride) + 1;
    Tensor<double> out = Tensor<double>::zeros({Cout, OH, OW});
    for (std::size_t oc = 0; oc < Cout; ++oc)
        for (std::size_t oy = 0; oy < OH; ++oy)
            for (std::size_t ox = 0; ox < OW; ++ox) {
                double acc = bias.empty() ? 0.0 : bias[oc];
                for (std::size_t ic = 0; ic < Cin; ++ic)
                    for (std::size_t ky = 0; ky < k; ++ky)
                        for (std::size_t kx = 0; kx < k; ++kx) {
                            const std::size_t iy =
                                oy * static_cast<std::size_t>(stride) + ky * dilation;
                            const std::size_t ix =
                                ox * static_cast<std::size_t>(stride) + kx * dilation;
                            acc += x.at({ic, iy, ix}) * w.at({oc, ic, ky, kx});
                            if (mac_counter) ++(*mac_counter);
                        }
                out.at({oc, oy, ox}) = acc;
            }
    return out;
}

// Per-channel depthwise variant.
inline Tensor<double> depthwise_ref(const Tensor<double>& x, const Tensor<double>& w,
                                    const std::vector<double>& bias, int pad) {
    const std::size_t C = x.extent(0), H = x.extent(1), W = x.extent(2);
    const std::size_t k = w.extent(1);
    Tensor<double> out = Tensor<double>::zeros({C, H, W});
    for (std::size_t c = 0; c < C; ++c)
        for (std::size_t oy = 0; oy < H; ++oy)
            for (std::size_t ox = 0; ox < W; ++ox) {
                double acc = bias.empty() ? 0.0 : bias[c];
                for (std::size_t ky = 0; ky < k; ++ky)
                    for (std::size_t kx = 0; kx < k; ++kx) {
                        const long iy = static_cast<long>(oy + ky) - pad;
                        const long ix = static_cast<long>(ox + kx) - pad;
                        if (iy < 0 || ix < 0 || iy >= static_cast<long>(H) ||
                            ix >= static_cast<long>(W))
                            continue;
                        acc += x.at({c, static_cast<std::size_t>(iy),
                                     static_cast<std::size_t>(ix)}) *
                               w.at({c, ky, kx});
                    }
                out.at({c, oy, ox}) = acc;
            }
    return out;
}

// Standard softmax attention, one query position at a time: weights of query
// j over key positions p from <q_j, k_p>/sqrt(d), output column j the
// weighted sum of V columns.
inline Tensor<double> attention_ref(const Tensor<double>& q, const Tensor<double>& k,
                                    const Tensor<double>& v) {
    const std::size_t d = q.extent(0), S = q.extent(1);
    const double inv = 1.0 / std::sqrt(static_cast<double>(d));
    Tensor<double> out = Tensor<double>::zeros({d, S});
    for (std::size_t j = 0; j < S; ++j) {
        std::vector<double> logits(S, 0.0);
        double mx = -1e300;
        for (std::size_t p = 0; p < S; ++p) {
            double dot = 0;
            for (std::size_t c = 0; c < d; ++c) dot += q.at({c, j}) * k.at({c, p});
            logits[p] = dot * inv;
            mx = std::max(mx, logits[p]);
        }
        double z = 0;
        for (std::size_t p = 0; p < S; ++p) z += std::exp(logits[p] - mx);
        for (std::size_t p = 0; p < S; ++p) {
            const double a = std::exp(logits[p] - mx) / z;
            for (std::size_t c = 0; c < d; ++c) out.at({c, j}) += a * v.at({c, p});
        }
    }
    return out;
}

// Number of valid placements of a dilated kernel along one axis, by sliding
// the window explicitly.
inline int count_placements(int H, int k, int d, int s) {
    int count = 0;
    for (int y0 = 0;; y0 += s) {
        const int last_tap = y0 + (k - 1) * d;
        if (last_tap >= H) break;
        ++count;
    }
    return count;
}

// ---- central finite differences ------------------------------------------

struct FdReport {
    double max_err = 0.0;
    std::string worst;
};

// Central-difference gradient check at 64-bit. `loss_fn` must rebuild the
// forward pass from the leaf tensors on every call (it runs under a fresh
// tape for the analytic pass and without a tape for the probes). Relative
// error uses max(1, |analytic|, |numeric|) as denominator. `stride` probes
// every stride-th element of large leaves.
inline FdReport finite_diff_check(
    std::vector<std::pair<std::string, Tensor<double>>> leaves,
    const std::function<Tensor<double>()>& loss_fn, double h = 1e-4,
    std::size_t stride = 1) {
    for (auto& [name, t] : leaves) {
        t.set_requires_grad(true);
        t.zero_grad();  // drop any gradient left over from an earlier check
    }

    Tape<double> tape;
    std::vector<std::vector<double>> analytic;
    {
        Tape<double>::Scope scope(tape);
        Tensor<double> loss = loss_fn();
        tape.backward(loss);
    }
    for (auto& [name, t] : leaves) analytic.push_back(t.grad());

    FdReport rep;
    for (std::size_t li = 0; li < leaves.size(); ++li) {
        Tensor<double>& t = leaves[li].second;
        for (std::size_t i = 0; i < t.size(); i += stride) {
            const double orig = t[i];
            t[i] = orig + h;
            const double fp = loss_fn().item();
            t[i] = orig - h;
            const double fm = loss_fn().item();
            t[i] = orig;
            const double fd = (fp - fm) / (2 * h);
            const double a = analytic[li][i];
            const double err =
                std::abs(fd - a) / std::max({1.0, std::abs(fd), std::abs(a)});
            if (err > rep.max_err) {
                rep.max_err = err;
                rep.worst = leaves[li].first + "[" + std::to_string(i) + "]";
            }
        }
    }
    return rep;
}

} // namespace caga::oracles
