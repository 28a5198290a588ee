#pragma once

#include <string>
#include <vector>

#include "caga/attention.hpp"
#include "caga/layers.hpp"

namespace caga {

// Desk-scale classifier: a small strided conv stem standing in for a
// pretrained backbone, one or more CAGA blocks, global average pooling and a
// linear head.
struct ModelConfig {
    int input_size = 32;                     // square input, (3, S, S)
    std::vector<int> stem_channels = {16, 32};  // one halving stage per entry
    CagaConfig caga;
    int num_classes = 4;
    int num_caga_blocks = 1;
    bool use_caga = true;  // false swaps the block for a parameter-free channel adapter

    int stem_out_channels() const {
        return stem_channels.empty() ? 3 : stem_channels.back();
    }

    int spatial_after_stem() const {
        int s = input_size;
        for (std::size_t i = 0; i < stem_channels.size(); ++i) s /= 2;
        return s;
    }

    void validate() const {
        caga.validate();
        if (input_size < 2) throw ConfigError("ModelConfig: input_size too small");
        if (num_classes < 2) throw ConfigError("ModelConfig: need at least 2 classes");
        if (num_caga_blocks < 1) throw ConfigError("ModelConfig: need at least 1 block");
        for (int c : stem_channels)
            if (c < 1) throw ConfigError("ModelConfig: stem channels must be positive");
        const int s = spatial_after_stem();
        const int keff = caga.caa.max_effective_kernel();
        if (use_caga && s < keff)
            throw ConfigError("ModelConfig: spatial size after stem (" + std::to_string(s) +
                              ") is below the largest effective kernel (" +
                              std::to_string(keff) +
                              "); use fewer stem stages or smaller dilations");
    }
};

template <typename T>
class Model {
public:
    Model(ModelConfig cfg, unsigned long long seed = kDefaultSeed) : cfg_(std::move(cfg)) {
        cfg_.validate();
        Rng rng(seed);
        int cin = 3;
        for (std::size_t i = 0; i < cfg_.stem_channels.size(); ++i) {
            const int cout = cfg_.stem_channels[i];
            StemStage st{detail::xavier_conv<T>(static_cast<std::size_t>(cout),
                                                static_cast<std::size_t>(cin), 2, rng),
                         Tensor<T>::zeros({static_cast<std::size_t>(cout)}),
                         BatchNormState<T>(cout)};
            const std::string p = "stem." + std::to_string(i) + ".";
            reg_.add_param(p + "conv.weight", st.w);
            reg_.add_param(p + "conv.bias", st.b);
            reg_.add_param(p + "bn.gamma", st.bn.gamma);
            reg_.add_param(p + "bn.beta", st.bn.beta);
            reg_.add_buffer(p + "bn.running_mean", st.bn.running_mean);
            reg_.add_buffer(p + "bn.running_var", st.bn.running_var);
            stem_.push_back(std::move(st));
            cin = cout;
        }
        const int block_channels = cfg_.caga.channels();
        if (cfg_.use_caga) {
            int bc_in = cin;
            for (int b = 0; b < cfg_.num_caga_blocks; ++b) {
                blocks_.push_back(make_caga_block_params<T>(cfg_.caga, bc_in, rng));
                register_caga_params(blocks_.back(), reg_,
                                     "caga." + std::to_string(b) + ".");
                bc_in = block_channels;
            }
            head_in_ = block_channels;
        } else {
            head_in_ = block_channels;  // adapter still feeds n*h channels
        }
        head_w_ = reg_.add_param(
            "head.weight",
            xavier_uniform_init<T>({static_cast<std::size_t>(cfg_.num_classes),
                                    static_cast<std::size_t>(head_in_)},
                                   static_cast<std::size_t>(head_in_),
                                   static_cast<std::size_t>(cfg_.num_classes), rng));
        head_b_ = reg_.add_param("head.bias",
                                 Tensor<T>::zeros({static_cast<std::size_t>(cfg_.num_classes)}));
    }

    const ModelConfig& config() const { return cfg_; }
    ParamRegistry<T>& registry() { return reg_; }
    const ParamRegistry<T>& registry() const { return reg_; }

    // Names usable as Grad-CAM taps.
    std::vector<std::string> feature_names() const {
        std::vector<std::string> names;
        for (std::size_t i = 0; i < stem_.size(); ++i)
            names.push_back("stem." + std::to_string(i));
        for (int b = 0; b < cfg_.num_caga_blocks; ++b)
            names.push_back("caga." + std::to_string(b));
        return names;
    }

    // images (B,3,S,S) -> logits (B,num_classes). When `capture` names a
    // feature tap, the tensor produced there is handed back through
    // `captured` (still attached to the active tape).
    Tensor<T> forward(const Tensor<T>& images, bool training = false,
                      const std::string& capture = "", Tensor<T>* captured = nullptr) {
        if (images.rank() != 4 || images.extent(1) != 3 ||
            images.extent(2) != static_cast<std::size_t>(cfg_.input_size) ||
            images.extent(3) != static_cast<std::size_t>(cfg_.input_size))
            throw ShapeError("Model::forward: expected (B,3," +
                             std::to_string(cfg_.input_size) + "," +
                             std::to_string(cfg_.input_size) + "), got " +
                             shape_str(images.shape()));
        bool want_capture = !capture.empty();
        bool captured_hit = false;
        Tensor<T> t = images;
        for (std::size_t i = 0; i < stem_.size(); ++i) {
            auto& st = stem_[i];
            ConvSpec spec{.in_channels = static_cast<int>(t.extent(1)),
                          .out_channels = static_cast<int>(st.w.extent(0)),
                          .kernel = 2,
                          .stride = 2,
                          .dilation = 1,
                          .padding = Padding::valid,
                          .bias = true};
            t = relu(batchnorm2d(conv2d(t, spec, st.w, st.b), st.bn, training));
            if (want_capture && capture == "stem." + std::to_string(i)) {
                if (captured) *captured = t;
                captured_hit = true;
            }
        }
        if (cfg_.use_caga) {
            for (std::size_t b = 0; b < blocks_.size(); ++b) {
                t = caga_block(t, cfg_.caga, blocks_[b], training);
                if (want_capture && capture == "caga." + std::to_string(b)) {
                    if (captured) *captured = t;
                    captured_hit = true;
                }
            }
        } else {
            t = adapt_channels(t, static_cast<std::size_t>(cfg_.caga.channels()));
            if (want_capture && capture == "caga.0") {
                if (captured) *captured = t;
                captured_hit = true;
            }
        }
        if (want_capture && !captured_hit) {
            std::string known;
            for (const auto& n : feature_names()) known += " " + n;
            throw ContractError("Model::forward: no feature layer named '" + capture +
                                "'; known:" + known);
        }
        Tensor<T> pooled = mean_axis(mean_axis(t, 3), 2);  // (B, C)
        return broadcast_add(matmul(pooled, transpose2d(head_w_)), head_b_, 1);
    }

    // Argmax per row with lowest-index tie-break.
    static std::vector<int> predict(const Tensor<T>& logits) {
        if (logits.rank() != 2)
            throw ShapeError("predict: expected (B,C) logits, got " +
                             shape_str(logits.shape()));
        const std::size_t B = logits.extent(0), C = logits.extent(1);
        std::vector<int> out(B, 0);
        for (std::size_t b = 0; b < B; ++b) {
            const T* row = logits.data() + b * C;
            std::size_t best = 0;
            for (std::size_t c = 1; c < C; ++c)
                if (row[c] > row[best]) best = c;
            out[b] = static_cast<int>(best);
        }
        return out;
    }

    std::vector<CagaBlockParams<T>>& caga_blocks() { return blocks_; }
    const std::vector<CagaBlockParams<T>>& caga_blocks() const { return blocks_; }

private:
    // Parameter-free stand-in used by the no-CAGA ablation: maps C_in feature
    // channels onto n*h channels by cyclic selection.
    static Tensor<T> adapt_channels(const Tensor<T>& x, std::size_t out_c) {
        const std::size_t in_c = x.extent(1);
        if (in_c == out_c) return x;
        std::vector<Tensor<T>> parts;
        for (std::size_t c = 0; c < out_c; ++c) parts.push_back(slice(x, 1, c % in_c, 1));
        return concat(parts, 1);
    }

    struct StemStage {
        Tensor<T> w, b;
        BatchNormState<T> bn;
    };

    ModelConfig cfg_;
    ParamRegistry<T> reg_;
    std::vector<StemStage> stem_;
    std::vector<CagaBlockParams<T>> blocks_;
    Tensor<T> head_w_, head_b_;
    int head_in_ = 0;
};

} // namespace caga
