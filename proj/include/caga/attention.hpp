#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "caga/layers.hpp"
#include "caga/ops.hpp"

// Cascaded Atrous Attention (per head) inside Cascaded Group Attention, plus
// the integrated block: DSConv input reduction, head/dilation cascades, final
// projection with residual, batch normalization.

namespace caga {

struct CaaConfig {
    int head_dim = 16;                  // h
    int d_qkv = 8;                      // per-branch Q/K/V embedding dim
    std::vector<int> dilations = {1, 2, 3};
    int kernel = 3;
    int stride = 1;
    bool cascade_dilations = true;

    void validate() const {
        if (head_dim < 1 || d_qkv < 1 || kernel < 1 || stride < 1)
            throw ConfigError("CaaConfig: h, d_qkv, k, s must be positive");
        if (dilations.empty()) throw ConfigError("CaaConfig: dilation list is empty");
        for (std::size_t i = 0; i < dilations.size(); ++i) {
            if (dilations[i] < 1) throw ConfigError("CaaConfig: dilations must be positive");
            if (i > 0 && dilations[i] <= dilations[i - 1])
                throw ConfigError("CaaConfig: dilations must be strictly increasing");
        }
    }

    int max_effective_kernel() const {
        return effective_kernel_size(kernel, dilations.back());
    }
};

struct CagaConfig {
    int num_heads = 3;  // n
    CaaConfig caa;
    bool cascade_heads = true;

    int channels() const { return num_heads * caa.head_dim; }

    void validate() const {
        if (num_heads < 1) throw ConfigError("CagaConfig: num_heads must be >= 1");
        caa.validate();
    }
};

// Q, K, V for one dilation branch, each (d_qkv, S) with columns indexed by
// flattened spatial position.
template <typename T>
struct AttentionTriple {
    Tensor<T> q, k, v;

    void validate() const {
        if (!q.defined() || !k.defined() || !v.defined())
            throw ContractError("AttentionTriple: undefined tensor");
        if (q.rank() != 2 || q.shape() != k.shape() || q.shape() != v.shape())
            throw ShapeError("AttentionTriple: Q/K/V shapes disagree: " +
                             shape_str(q.shape()) + ", " + shape_str(k.shape()) + ", " +
                             shape_str(v.shape()));
    }
};

// Scaled dot-product attention over spatial positions. Logits for query
// position j against key position p are <q_j, k_p> / sqrt(d_qkv); the softmax
// runs over key positions, so every query's weight row is stochastic. Output
// column j is the convex combination of V's columns under those weights.
template <typename T>
Tensor<T> scaled_dot_attention(const AttentionTriple<T>& t) {
    t.validate();
    const std::size_t dq = t.q.extent(0);
    const T inv_sqrt = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dq)));
    Tensor<T> logits = scale(matmul(transpose2d(t.q), t.k), inv_sqrt);  // (S,S)
    Tensor<T> weights = softmax_rows(logits);
    return matmul(t.v, transpose2d(weights));  // (dq,S)
}

// Trainable arrays for one CAA head. The k x k QKV convolutions and their
// 1 x 1 transforms are bias-free; projections carry bias.
template <typename T>
struct CaaHeadParams {
    std::vector<Tensor<T>> qkv_conv_w;   // per dilation: (3*dq, h, k, k)
    std::vector<Tensor<T>> qkv_point_w;  // per dilation: (3*dq, 3*dq, 1, 1)
    std::vector<Tensor<T>> cascade_w;    // per dilation after the first: (h, dq, 1, 1)
    std::vector<Tensor<T>> cascade_b;    // per dilation after the first: (h)
    Tensor<T> out_proj_w;                // (h, D*dq, 1, 1)
    Tensor<T> out_proj_b;                // (h)
};

template <typename T>
struct CagaBlockParams {
    int in_channels = 0;
    Tensor<T> ds_depth_w, ds_depth_b;    // (C_in, k, k), (C_in)
    Tensor<T> ds_point_w, ds_point_b;    // (C, C_in, 1, 1), (C)
    std::vector<CaaHeadParams<T>> heads;
    Tensor<T> final_proj_w, final_proj_b;  // (C, C, 1, 1), (C)
    BatchNormState<T> bn;

    explicit CagaBlockParams(int channels) : bn(channels) {}
};

namespace detail {

template <typename T>
Tensor<T> xavier_conv(std::size_t cout, std::size_t cin, std::size_t k, Rng& rng) {
    return xavier_uniform_init<T>({cout, cin, k, k}, cin * k * k, cout * k * k, rng);
}

} // namespace detail

// Builds all trainable arrays of one CAGA block with Xavier-uniform weights
// and zero biases. Cascade projections exist only when cascade_dilations is
// set, so parameter totals per config match caga_param_count.
template <typename T>
CagaBlockParams<T> make_caga_block_params(const CagaConfig& cfg, int in_channels, Rng& rng) {
    cfg.validate();
    if (in_channels < 1) throw ConfigError("make_caga_block_params: in_channels must be >= 1");
    const std::size_t C = static_cast<std::size_t>(cfg.channels());
    const std::size_t Cin = static_cast<std::size_t>(in_channels);
    const std::size_t h = static_cast<std::size_t>(cfg.caa.head_dim);
    const std::size_t dq = static_cast<std::size_t>(cfg.caa.d_qkv);
    const std::size_t k = static_cast<std::size_t>(cfg.caa.kernel);
    const std::size_t D = cfg.caa.dilations.size();

    CagaBlockParams<T> p(static_cast<int>(C));
    p.in_channels = in_channels;
    p.ds_depth_w = xavier_uniform_init<T>({Cin, k, k}, k * k, k * k, rng);
    p.ds_depth_b = Tensor<T>::zeros({Cin});
    p.ds_point_w = detail::xavier_conv<T>(C, Cin, 1, rng);
    p.ds_point_b = Tensor<T>::zeros({C});
    for (int i = 0; i < cfg.num_heads; ++i) {
        CaaHeadParams<T> head;
        for (std::size_t di = 0; di < D; ++di) {
            head.qkv_conv_w.push_back(detail::xavier_conv<T>(3 * dq, h, k, rng));
            head.qkv_point_w.push_back(detail::xavier_conv<T>(3 * dq, 3 * dq, 1, rng));
        }
        if (cfg.caa.cascade_dilations) {
            for (std::size_t di = 1; di < D; ++di) {
                head.cascade_w.push_back(detail::xavier_conv<T>(h, dq, 1, rng));
                head.cascade_b.push_back(Tensor<T>::zeros({h}));
            }
        }
        head.out_proj_w = detail::xavier_conv<T>(h, D * dq, 1, rng);
        head.out_proj_b = Tensor<T>::zeros({h});
        p.heads.push_back(std::move(head));
    }
    p.final_proj_w = detail::xavier_conv<T>(C, C, 1, rng);
    p.final_proj_b = Tensor<T>::zeros({C});
    return p;
}

template <typename T>
void register_caga_params(CagaBlockParams<T>& p, ParamRegistry<T>& reg,
                          const std::string& prefix) {
    reg.add_param(prefix + "dsconv.depthwise.weight", p.ds_depth_w);
    reg.add_param(prefix + "dsconv.depthwise.bias", p.ds_depth_b);
    reg.add_param(prefix + "dsconv.pointwise.weight", p.ds_point_w);
    reg.add_param(prefix + "dsconv.pointwise.bias", p.ds_point_b);
    for (std::size_t i = 0; i < p.heads.size(); ++i) {
        auto& head = p.heads[i];
        const std::string hp = prefix + "head" + std::to_string(i) + ".";
        for (std::size_t di = 0; di < head.qkv_conv_w.size(); ++di) {
            reg.add_param(hp + "dil" + std::to_string(di) + ".qkv_conv.weight",
                          head.qkv_conv_w[di]);
            reg.add_param(hp + "dil" + std::to_string(di) + ".qkv_point.weight",
                          head.qkv_point_w[di]);
        }
        for (std::size_t ci = 0; ci < head.cascade_w.size(); ++ci) {
            reg.add_param(hp + "cascade" + std::to_string(ci + 1) + ".weight",
                          head.cascade_w[ci]);
            reg.add_param(hp + "cascade" + std::to_string(ci + 1) + ".bias",
                          head.cascade_b[ci]);
        }
        reg.add_param(hp + "out_proj.weight", head.out_proj_w);
        reg.add_param(hp + "out_proj.bias", head.out_proj_b);
    }
    reg.add_param(prefix + "final_proj.weight", p.final_proj_w);
    reg.add_param(prefix + "final_proj.bias", p.final_proj_b);
    reg.add_param(prefix + "bn.gamma", p.bn.gamma);
    reg.add_param(prefix + "bn.beta", p.bn.beta);
    reg.add_buffer(prefix + "bn.running_mean", p.bn.running_mean);
    reg.add_buffer(prefix + "bn.running_var", p.bn.running_var);
}

// One head of Cascaded Atrous Attention on a (h, H, W) slice. For each
// dilation in order: the branch input is the head input; later dilations
// under cascade_dilations also add the previous branch's attention map,
// projected to h channels and resized to (H, W). A valid dilated k x k conv
// (3*d_qkv channels) and a 1 x 1 transform produce Q/K/V over flattened
// positions; attention runs per branch; each branch map is restored to
// (H, W). The concatenated maps project back to h channels.
template <typename T>
Tensor<T> caa_forward(const Tensor<T>& head_input, const CaaConfig& cfg,
                      const CaaHeadParams<T>& params) {
    cfg.validate();
    if (head_input.rank() != 3 ||
        head_input.extent(0) != static_cast<std::size_t>(cfg.head_dim))
        throw ShapeError("caa_forward: expected (" + std::to_string(cfg.head_dim) +
                         ",H,W) input, got " + shape_str(head_input.shape()));
    const std::size_t H = head_input.extent(1), W = head_input.extent(2);
    for (int d : cfg.dilations) {
        const int keff = effective_kernel_size(cfg.kernel, d);
        if (H < static_cast<std::size_t>(keff) || W < static_cast<std::size_t>(keff))
            throw ShapeError("caa_forward: input " + std::to_string(H) + "x" +
                             std::to_string(W) + " smaller than effective kernel " +
                             std::to_string(keff) + " of dilation " + std::to_string(d));
    }
    const std::size_t dq = static_cast<std::size_t>(cfg.d_qkv);
    const std::size_t D = cfg.dilations.size();

    Tensor<T> prev_attn;  // (dq, H~, W~) of the previous branch
    std::vector<Tensor<T>> branch_maps;
    for (std::size_t di = 0; di < D; ++di) {
        const int d = cfg.dilations[di];
        Tensor<T> branch_in = head_input;
        if (di > 0 && cfg.cascade_dilations) {
            if (di - 1 >= params.cascade_w.size())
                throw ConfigError("caa_forward: cascade projection parameters missing");
            ConvSpec proj_spec{.in_channels = cfg.d_qkv,
                               .out_channels = cfg.head_dim,
                               .kernel = 1,
                               .stride = 1,
                               .dilation = 1,
                               .padding = Padding::valid,
                               .bias = true};
            Tensor<T> proj = conv2d(prev_attn, proj_spec, params.cascade_w[di - 1],
                                    params.cascade_b[di - 1]);
            branch_in = add(head_input, interpolate_bilinear(proj, H, W));
        }
        ConvSpec qkv_spec{.in_channels = cfg.head_dim,
                          .out_channels = 3 * cfg.d_qkv,
                          .kernel = cfg.kernel,
                          .stride = cfg.stride,
                          .dilation = d,
                          .padding = Padding::valid,
                          .bias = false};
        Tensor<T> qkv = conv2d(branch_in, qkv_spec, params.qkv_conv_w[di]);
        ConvSpec point_spec{.in_channels = 3 * cfg.d_qkv,
                            .out_channels = 3 * cfg.d_qkv,
                            .kernel = 1,
                            .stride = 1,
                            .dilation = 1,
                            .padding = Padding::valid,
                            .bias = false};
        qkv = conv2d(qkv, point_spec, params.qkv_point_w[di]);
        const std::size_t bh = qkv.extent(1), bw = qkv.extent(2);
        const std::size_t S = bh * bw;
        Tensor<T> flat = reshape(qkv, {3 * dq, S});
        AttentionTriple<T> triple{slice(flat, 0, 0, dq), slice(flat, 0, dq, dq),
                                  slice(flat, 0, 2 * dq, dq)};
        Tensor<T> attn = scaled_dot_attention(triple);
        prev_attn = reshape(attn, {dq, bh, bw});
        branch_maps.push_back(interpolate_bilinear(prev_attn, H, W));
    }

    Tensor<T> cat = concat(branch_maps, 0);  // (D*dq, H, W)
    ConvSpec out_spec{.in_channels = static_cast<int>(D) * cfg.d_qkv,
                      .out_channels = cfg.head_dim,
                      .kernel = 1,
                      .stride = 1,
                      .dilation = 1,
                      .padding = Padding::valid,
                      .bias = true};
    return conv2d(cat, out_spec, params.out_proj_w, params.out_proj_b);
}

// Cascaded Group Attention over (n*h, H, W): channel split into n heads, CAA
// per head with the previous head's output added to the next head's slice
// when cascade_heads is set, then concat, 1 x 1 projection and residual.
template <typename T>
Tensor<T> cga_forward(const Tensor<T>& x, const CagaConfig& cfg,
                      const CagaBlockParams<T>& params) {
    cfg.validate();
    const std::size_t C = static_cast<std::size_t>(cfg.channels());
    if (x.rank() != 3 || x.extent(0) != C)
        throw ConfigError("cga_forward: expected (" + std::to_string(C) + ",H,W) input, got " +
                          shape_str(x.shape()));
    const std::size_t h = static_cast<std::size_t>(cfg.caa.head_dim);

    std::vector<Tensor<T>> head_outs;
    Tensor<T> prev;
    for (int i = 0; i < cfg.num_heads; ++i) {
        Tensor<T> sl = slice(x, 0, static_cast<std::size_t>(i) * h, h);
        Tensor<T> head_in = (i > 0 && cfg.cascade_heads) ? add(sl, prev) : sl;
        prev = caa_forward(head_in, cfg.caa, params.heads[static_cast<std::size_t>(i)]);
        head_outs.push_back(prev);
    }
    Tensor<T> cat = concat(head_outs, 0);
    ConvSpec proj_spec{.in_channels = static_cast<int>(C),
                       .out_channels = static_cast<int>(C),
                       .kernel = 1,
                       .stride = 1,
                       .dilation = 1,
                       .padding = Padding::valid,
                       .bias = true};
    Tensor<T> proj = conv2d(cat, proj_spec, params.final_proj_w, params.final_proj_b);
    return add(x, proj);
}

// Depthwise-separable input reduction to n*h channels (spatial preserved).
template <typename T>
Tensor<T> caga_input_reduction(const Tensor<T>& x, const CagaConfig& cfg,
                               const CagaBlockParams<T>& params) {
    ConvSpec depth_spec{.in_channels = params.in_channels,
                        .out_channels = params.in_channels,
                        .kernel = cfg.caa.kernel,
                        .stride = 1,
                        .dilation = 1,
                        .padding = Padding::same,
                        .bias = true};
    Tensor<T> t = depthwise_conv2d(x, depth_spec, params.ds_depth_w, params.ds_depth_b);
    ConvSpec point_spec{.in_channels = params.in_channels,
                        .out_channels = cfg.channels(),
                        .kernel = 1,
                        .stride = 1,
                        .dilation = 1,
                        .padding = Padding::valid,
                        .bias = true};
    return conv2d(t, point_spec, params.ds_point_w, params.ds_point_b);
}

// Full block: DSConv reduction to n*h channels, cascaded group attention
// (whose Eq.-(4) addition is the block's one residual), then batch
// normalization. Accepts (C,H,W) or (B,C,H,W).
template <typename T>
Tensor<T> caga_block(const Tensor<T>& x, const CagaConfig& cfg, CagaBlockParams<T>& params,
                     bool training = false) {
    if (x.rank() == 3) {
        Tensor<T> reduced = caga_input_reduction(x, cfg, params);
        return batchnorm2d(cga_forward(reduced, cfg, params), params.bn, training);
    }
    if (x.rank() != 4)
        throw ShapeError("caga_block: expected (C,H,W) or (B,C,H,W), got " +
                         shape_str(x.shape()));
    const std::size_t B = x.extent(0);
    const std::size_t C = static_cast<std::size_t>(cfg.channels());
    Tensor<T> reduced = caga_input_reduction(x, cfg, params);  // (B, C, H, W)
    const std::size_t H = reduced.extent(2), W = reduced.extent(3);
    std::vector<Tensor<T>> outs;
    for (std::size_t b = 0; b < B; ++b) {
        Tensor<T> xb = reshape(slice(reduced, 0, b, 1), {C, H, W});
        outs.push_back(reshape(cga_forward(xb, cfg, params), {1, C, H, W}));
    }
    Tensor<T> stacked = outs.size() == 1 ? outs[0] : concat(outs, 0);
    return batchnorm2d(stacked, params.bn, training);
}

// Closed-form trainable-parameter count of one block (matches enumeration of
// every array built by make_caga_block_params).
inline long long caga_param_count(const CagaConfig& cfg, int in_channels) {
    cfg.validate();
    if (in_channels < 1) throw ConfigError("caga_param_count: in_channels must be >= 1");
    const long long C = cfg.channels();
    const long long Cin = in_channels;
    const long long h = cfg.caa.head_dim;
    const long long dq = cfg.caa.d_qkv;
    const long long k = cfg.caa.kernel;
    const long long D = static_cast<long long>(cfg.caa.dilations.size());
    const long long n = cfg.num_heads;

    const long long dsconv = Cin * k * k + Cin + Cin * C + C;
    const long long qkv = D * (3 * dq * h * k * k) + D * (9 * dq * dq);
    const long long cascade = cfg.caa.cascade_dilations ? (D - 1) * (h * dq + h) : 0;
    const long long head = qkv + cascade + (h * D * dq + h);
    const long long final_proj = C * C + C;
    const long long bn = 2 * C;
    return dsconv + n * head + final_proj + bn;
}

// Parameter count of the cascade 1x1 projections alone (the only arrays whose
// existence depends on the cascade_dilations toggle).
inline long long caga_cascade_param_count(const CagaConfig& cfg) {
    cfg.validate();
    const long long h = cfg.caa.head_dim;
    const long long dq = cfg.caa.d_qkv;
    const long long D = static_cast<long long>(cfg.caa.dilations.size());
    return cfg.num_heads * (D - 1) * (h * dq + h);
}

} // namespace caga
