#pragma once

#include <algorithm>
#include <cmath>
#include <sstream>
#include <string>
#include <vector>

#include "caga/model.hpp"
#include "caga/ppm.hpp"

namespace caga {

// ---- Grad-CAM ---------------------------------------------------------------

template <typename T>
struct GradCamResult {
    Tensor<T> heatmap;  // (H,W), values in [0,1]
    int target_class = 0;
    std::string layer;
};

// Channel-importance combine: weight_c = spatial mean of the gradient on
// channel c; cam = ReLU(sum_c weight_c * feature_c). Returns the raw map
// before upsampling/normalization.
template <typename T>
Tensor<T> grad_cam_combine(const Tensor<T>& features, const Tensor<T>& grads) {
    if (features.rank() != 3 || features.shape() != grads.shape())
        throw ShapeError("grad_cam_combine: feature/grad shapes disagree: " +
                         shape_str(features.shape()) + " vs " + shape_str(grads.shape()));
    const std::size_t C = features.extent(0), h = features.extent(1), w = features.extent(2);
    const std::size_t plane = h * w;
    Tensor<T> cam = Tensor<T>::zeros({h, w});
    for (std::size_t c = 0; c < C; ++c) {
        T wsum = T(0);
        for (std::size_t i = 0; i < plane; ++i) wsum += grads[c * plane + i];
        const T weight = wsum / static_cast<T>(plane);
        for (std::size_t i = 0; i < plane; ++i) cam[i] += weight * features[c * plane + i];
    }
    for (std::size_t i = 0; i < plane; ++i) cam[i] = std::max(cam[i], T(0));
    return cam;
}

// Min-max normalization to [0,1]. A flat positive map becomes all ones; an
// all-zero map stays all zeros.
template <typename T>
void minmax_normalize(Tensor<T>& t) {
    T lo = t[0], hi = t[0];
    for (std::size_t i = 0; i < t.size(); ++i) {
        lo = std::min(lo, t[i]);
        hi = std::max(hi, t[i]);
    }
    if (hi > lo) {
        for (std::size_t i = 0; i < t.size(); ++i) t[i] = (t[i] - lo) / (hi - lo);
    } else if (hi > T(0)) {
        for (std::size_t i = 0; i < t.size(); ++i) t[i] = T(1);
    }
}

// Heatmap for `target_class` tapped at the named feature layer (the first
// CAGA block's post-BN output by default). The image must already be
// normalized the way the model was trained.
template <typename T>
GradCamResult<T> grad_cam(Model<T>& model, const Tensor<T>& image, int target_class,
                          const std::string& layer = "caga.0") {
    if (image.rank() != 3)
        throw ShapeError("grad_cam: expected (3,H,W) image, got " + shape_str(image.shape()));
    if (target_class < 0 || target_class >= model.config().num_classes)
        throw ContractError("grad_cam: target class " + std::to_string(target_class) +
                            " out of range");
    const std::size_t S = image.extent(1);
    Tensor<T> batch = reshape(image, {1, 3, image.extent(1), image.extent(2)});

    Tape<T> tape;
    Tensor<T> captured;
    {
        typename Tape<T>::Scope scope(tape);
        batch.set_requires_grad(true);  // ensures the chain to the tap is recorded
        Tensor<T> logits = model.forward(batch, /*training=*/false, layer, &captured);
        Tensor<T> target = reshape(
            slice(slice(logits, 1, static_cast<std::size_t>(target_class), 1), 0, 0, 1), {});
        tape.backward(target);
    }
    const std::size_t C = captured.extent(1), fh = captured.extent(2), fw = captured.extent(3);
    Tensor<T> feats = Tensor<T>::from_vector({C, fh, fw}, captured.values());
    Tensor<T> grads = Tensor<T>::from_vector({C, fh, fw}, captured.grad());
    model.registry().zero_grads();  // do not leak gradient state into the caller
    Tensor<T> cam = grad_cam_combine(feats, grads);
    cam = interpolate_bilinear(reshape(cam, {1, fh, fw}), S, S);
    cam = reshape(cam, {S, S});
    minmax_normalize(cam);
    return GradCamResult<T>{cam, target_class, layer};
}

template <typename T>
RawGray heatmap_to_pgm(const Tensor<T>& heatmap) {
    if (heatmap.rank() != 2)
        throw ShapeError("heatmap_to_pgm: expected (H,W), got " + shape_str(heatmap.shape()));
    RawGray g;
    g.height = static_cast<int>(heatmap.extent(0));
    g.width = static_cast<int>(heatmap.extent(1));
    g.v.resize(heatmap.size());
    for (std::size_t i = 0; i < heatmap.size(); ++i)
        g.v[i] = static_cast<unsigned char>(
            std::lround(std::clamp(static_cast<double>(heatmap[i]), 0.0, 1.0) * 255.0));
    return g;
}

// Heat ramp black -> red -> yellow -> white, alpha-blended 0.5 onto the
// original [0,1] image.
template <typename T>
RawImage heatmap_overlay(const Tensor<T>& original, const Tensor<T>& heatmap) {
    if (original.rank() != 3 || original.extent(0) != 3 ||
        original.extent(1) != heatmap.extent(0) || original.extent(2) != heatmap.extent(1))
        throw ShapeError("heatmap_overlay: image/heatmap shapes disagree");
    const std::size_t plane = heatmap.size();
    RawImage img;
    img.height = static_cast<int>(heatmap.extent(0));
    img.width = static_cast<int>(heatmap.extent(1));
    img.rgb.resize(plane * 3);
    for (std::size_t i = 0; i < plane; ++i) {
        const double hv = std::clamp(static_cast<double>(heatmap[i]), 0.0, 1.0);
        const double heat[3] = {std::min(1.0, 3.0 * hv),
                                std::clamp(3.0 * hv - 1.0, 0.0, 1.0),
                                std::clamp(3.0 * hv - 2.0, 0.0, 1.0)};
        for (std::size_t c = 0; c < 3; ++c) {
            const double base =
                std::clamp(static_cast<double>(original[c * plane + i]), 0.0, 1.0);
            img.rgb[i * 3 + c] = static_cast<unsigned char>(
                std::lround((0.5 * base + 0.5 * heat[c]) * 255.0));
        }
    }
    return img;
}

// ---- parameter / MAC accounting -----------------------------------------------

struct ProfileRow {
    std::string layer;
    long long params = 0;
    long long macs = 0;
};

struct ProfileReport {
    std::vector<ProfileRow> rows;

    long long total_params() const {
        long long t = 0;
        for (const auto& r : rows) t += r.params;
        return t;
    }
    long long total_macs() const {
        long long t = 0;
        for (const auto& r : rows) t += r.macs;
        return t;
    }
};

// MAC conventions (per single image): conv k^2*Cin*Cout*OH*OW, depthwise
// k^2*C*OH*OW, linear in*out, attention branch 2*d_qkv*S^2 plus S^2 for the
// softmax, interpolation 4 per output element. Normalizations, activations
// and elementwise adds count 0.
inline long long conv_mac_count(long long cin, long long cout, long long k, long long oh,
                                long long ow) {
    return k * k * cin * cout * oh * ow;
}

// Exact per-named-layer trainable element counts from the registry. A layer
// is a registered name minus its final component.
template <typename T>
ProfileReport count_params(const Model<T>& model) {
    ProfileReport rep;
    for (const auto& [name, t] : model.registry().params) {
        const auto dot = name.rfind('.');
        const std::string layer = dot == std::string::npos ? name : name.substr(0, dot);
        auto it = std::find_if(rep.rows.begin(), rep.rows.end(),
                               [&layer](const ProfileRow& r) { return r.layer == layer; });
        if (it == rep.rows.end())
            rep.rows.push_back({layer, static_cast<long long>(t.size()), 0});
        else
            it->params += static_cast<long long>(t.size());
    }
    return rep;
}

// Analytic per-layer parameter and MAC counts for one forward image, walking
// the same layer structure the model builds.
template <typename T>
ProfileReport profile_model(const Model<T>& model) {
    const ModelConfig& mc = model.config();
    const CagaConfig& cc = mc.caga;
    ProfileReport rep;
    auto row = [&rep](const std::string& name, long long params, long long macs) {
        rep.rows.push_back({name, params, macs});
    };

    long long cin = 3, spatial = mc.input_size;
    for (std::size_t i = 0; i < mc.stem_channels.size(); ++i) {
        const long long cout = mc.stem_channels[i];
        const long long out_sp = (spatial - 2) / 2 + 1;
        row("stem." + std::to_string(i) + ".conv", 4 * cin * cout + cout,
            conv_mac_count(cin, cout, 2, out_sp, out_sp));
        row("stem." + std::to_string(i) + ".bn", 2 * cout, 0);
        cin = cout;
        spatial = out_sp;
    }

    const long long C = cc.channels();
    const long long h = cc.caa.head_dim, dq = cc.caa.d_qkv, k = cc.caa.kernel;
    const long long D = static_cast<long long>(cc.caa.dilations.size());
    const long long H = spatial, W = spatial;
    if (mc.use_caga) {
        long long bc_in = cin;
        for (int b = 0; b < mc.num_caga_blocks; ++b) {
            const std::string bp = "caga." + std::to_string(b) + ".";
            row(bp + "dsconv.depthwise", bc_in * k * k + bc_in,
                k * k * bc_in * H * W);  // same padding keeps H,W
            row(bp + "dsconv.pointwise", bc_in * C + C, conv_mac_count(bc_in, C, 1, H, W));
            for (int i = 0; i < cc.num_heads; ++i) {
                const std::string hp = bp + "head" + std::to_string(i) + ".";
                long long prev_hh = 0, prev_ww = 0;
                for (long long j = 0; j < D; ++j) {
                    const int d = cc.caa.dilations[static_cast<std::size_t>(j)];
                    const long long hh = dilated_output_extent(static_cast<int>(H), cc.caa.kernel,
                                                               d, cc.caa.stride);
                    const long long ww = dilated_output_extent(static_cast<int>(W), cc.caa.kernel,
                                                               d, cc.caa.stride);
                    const long long S = hh * ww;
                    const std::string dp = hp + "dil" + std::to_string(j) + ".";
                    if (j > 0 && cc.caa.cascade_dilations)
                        row(hp + "cascade" + std::to_string(j), h * dq + h,
                            conv_mac_count(dq, h, 1, prev_hh, prev_ww) + 4 * h * H * W);
                    row(dp + "qkv_conv", 3 * dq * h * k * k,
                        conv_mac_count(h, 3 * dq, k, hh, ww));
                    row(dp + "qkv_point", 9 * dq * dq, conv_mac_count(3 * dq, 3 * dq, 1, hh, ww));
                    row(dp + "attention", 0, 2 * dq * S * S);
                    row(dp + "softmax", 0, S * S);
                    row(dp + "interp", 0, 4 * dq * H * W);
                    prev_hh = hh;
                    prev_ww = ww;
                }
                row(hp + "out_proj", h * D * dq + h, conv_mac_count(D * dq, h, 1, H, W));
            }
            row(bp + "final_proj", C * C + C, conv_mac_count(C, C, 1, H, W));
            row(bp + "bn", 2 * C, 0);
            bc_in = C;
        }
    }
    row("head", C * mc.num_classes + mc.num_classes, C * mc.num_classes);
    return rep;
}

// reduction % = 1 - new/old
inline double param_reduction(long long old_count, long long new_count) {
    if (old_count <= 0) throw ContractError("param_reduction: old count must be positive");
    return 1.0 - static_cast<double>(new_count) / static_cast<double>(old_count);
}

inline std::string profile_csv(const ProfileReport& rep, bool macs_as_flops = false) {
    std::ostringstream os;
    os << "layer,params," << (macs_as_flops ? "flops" : "macs") << "\n";
    const long long f = macs_as_flops ? 2 : 1;
    for (const auto& r : rep.rows)
        os << r.layer << "," << r.params << "," << r.macs * f << "\n";
    os << "total," << rep.total_params() << "," << rep.total_macs() * f << "\n";
    return os.str();
}

} // namespace caga
