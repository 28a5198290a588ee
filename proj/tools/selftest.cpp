#include "selftest.hpp"

#include <cmath>
#include <cstdio>
#include <functional>
#include <sstream>
#include <vector>

#include "caga/attention.hpp"
#include "caga/config_kv.hpp"
#include "caga/dataio.hpp"
#include "caga/interpret.hpp"
#include "caga/model.hpp"
#include "caga/oracles.hpp"
#include "caga/train.hpp"

namespace caga::selftest {

namespace {

using Tensor64 = Tensor<double>;

Tensor64 random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    Tensor64 t = Tensor64::zeros(std::move(shape));
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(lo, hi);
    return t;
}

double max_abs_diff(const Tensor64& a, const Tensor64& b) {
    double m = 0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

struct Harness {
    std::string fault;
    int failures = 0;
    int total = 0;

    void check(const std::string& name, const std::function<std::string()>& fn) {
        ++total;
        std::string msg;
        try {
            msg = fn();
        } catch (const std::exception& e) {
            msg = std::string("exception: ") + e.what();
        }
        if (msg.empty()) {
            std::printf("[PASS] %s\n", name.c_str());
        } else {
            std::printf("[FAIL] %s: %s\n", name.c_str(), msg.c_str());
            ++failures;
        }
    }

    // Gradient check through the oracle harness; when the fault name matches,
    // the analytic gradient of the first leaf is corrupted before comparison.
    std::string grad_check(const std::string& op,
                           std::vector<std::pair<std::string, Tensor64>> leaves,
                           const std::function<Tensor64()>& loss_fn, double tol = 1e-4) {
        for (auto& [n, t] : leaves) {
            t.set_requires_grad(true);
            t.zero_grad();
        }
        Tape<double> tape;
        {
            Tape<double>::Scope scope(tape);
            tape.backward(loss_fn());
        }
        std::vector<std::vector<double>> analytic;
        for (auto& [n, t] : leaves) analytic.push_back(t.grad());
        if (fault == op) analytic[0][0] += 0.5;  // simulated wrong backward rule

        double worst = 0;
        for (std::size_t li = 0; li < leaves.size(); ++li) {
            Tensor64& t = leaves[li].second;
            for (std::size_t i = 0; i < t.size(); ++i) {
                const double orig = t[i];
                const double h = 1e-4;
                t[i] = orig + h;
                const double fp = loss_fn().item();
                t[i] = orig - h;
                const double fm = loss_fn().item();
                t[i] = orig;
                const double fd = (fp - fm) / (2 * h);
                const double err = std::abs(fd - analytic[li][i]) /
                                   std::max({1.0, std::abs(fd), std::abs(analytic[li][i])});
                worst = std::max(worst, err);
            }
        }
        for (auto& [n, t] : leaves) t.zero_grad();
        if (worst >= tol) {
            char buf[128];
            std::snprintf(buf, sizeof(buf), "gradient of op '%s' off by %.3g (tol %.1g)",
                          op.c_str(), worst, tol);
            return buf;
        }
        return "";
    }
};

} // namespace

int run_all(const std::string& inject_fault) {
    Harness h;
    h.fault = inject_fault;
    Rng rng(kDefaultSeed);

    // ---- tensor-autodiff ----
    h.check("tensor.matmul_oracle", [&] {
        for (int rep = 0; rep < 10; ++rep) {
            Tensor64 a = random_tensor({4, 5}, rng);
            Tensor64 b = random_tensor({5, 3}, rng);
            if (max_abs_diff(matmul(a, b), oracles::matmul_ref(a, b)) > 1e-6)
                return std::string("matmul disagrees with the triple-loop reference");
        }
        return std::string();
    });
    h.check("tensor.softmax_properties", [&] {
        Tensor64 x = random_tensor({6, 9}, rng, -5, 5);
        Tensor64 y = softmax_rows(x);
        for (std::size_t i = 0; i < 6; ++i) {
            double s = 0;
            for (std::size_t j = 0; j < 9; ++j) {
                if (y.at({i, j}) < 0 || y.at({i, j}) > 1) return std::string("value outside [0,1]");
                s += y.at({i, j});
            }
            if (std::abs(s - 1.0) > 1e-6) return std::string("row sum differs from 1");
        }
        Tensor64 spike = Tensor64::from_vector({1, 2}, {1000.0, 0.0});
        if (std::abs(softmax_rows(spike)[0] - 1.0) > 1e-12)
            return std::string("max-subtraction stability violated");
        return std::string();
    });
    h.check("tensor.grad_matmul", [&] {
        Tensor64 a = random_tensor({3, 4}, rng);
        Tensor64 b = random_tensor({4, 2}, rng);
        Tensor64 w = random_tensor({3, 2}, rng);
        return h.grad_check("matmul", {{"a", a}, {"b", b}},
                            [&] { return sum(mul(matmul(a, b), w)); });
    });
    h.check("tensor.grad_softmax", [&] {
        Tensor64 x = random_tensor({3, 5}, rng);
        Tensor64 w = random_tensor({3, 5}, rng);
        return h.grad_check("softmax_rows", {{"x", x}},
                            [&] { return sum(mul(softmax_rows(x), w)); });
    });
    h.check("tensor.grad_elementwise", [&] {
        Tensor64 x = random_tensor({3, 4}, rng, 0.4, 1.6);
        Tensor64 y = random_tensor({3, 4}, rng, 0.4, 1.6);
        Tensor64 w = random_tensor({4, 3}, rng);
        return h.grad_check("elementwise", {{"x", x}, {"y", y}}, [&] {
            Tensor64 t = add(mul(x, y), exp(scale(sub(x, y), 0.5)));
            t = add(t, pow(add_scalar(relu(x), 0.5), 2.0));
            t = add(t, log(add_scalar(mul(y, y), 1.0)));
            return sum(mul(permute(t, {1, 0}), w));
        });
    });

    // ---- nn-layers ----
    h.check("layers.conv_oracle", [&] {
        for (int d : {1, 2, 3}) {
            Tensor64 x = random_tensor({3, 9, 9}, rng);
            Tensor64 w = random_tensor({4, 3, 3, 3}, rng);
            ConvSpec spec{.in_channels = 3, .out_channels = 4, .kernel = 3, .stride = 1,
                          .dilation = d, .padding = Padding::valid, .bias = false};
            if (max_abs_diff(conv2d(x, spec, w), oracles::conv2d_ref(x, w, {}, d, 1)) > 1e-6)
                return "dilation " + std::to_string(d) + " disagrees with the loop reference";
        }
        return std::string();
    });
    h.check("layers.shape_law", [&] {
        for (int k : {1, 3, 5})
            for (int d : {1, 2, 3})
                for (int s : {1, 2})
                    for (int H = effective_kernel_size(k, d); H <= 18; ++H)
                        if (dilated_output_extent(H, k, d, s) !=
                            oracles::count_placements(H, k, d, s))
                            return std::string("formula and placement enumeration disagree");
        return std::string();
    });
    h.check("layers.grad_conv", [&] {
        Tensor64 x = random_tensor({2, 6, 6}, rng);
        Tensor64 w = random_tensor({3, 2, 3, 3}, rng, -0.5, 0.5);
        Tensor64 b = random_tensor({3}, rng);
        Tensor64 probe = random_tensor({3, 2, 2}, rng);
        ConvSpec spec{.in_channels = 2, .out_channels = 3, .kernel = 3, .dilation = 2,
                      .bias = true};
        return h.grad_check("conv2d", {{"x", x}, {"w", w}, {"b", b}},
                            [&] { return sum(mul(conv2d(x, spec, w, b), probe)); });
    });
    h.check("layers.batchnorm_stats", [&] {
        Tensor64 x = random_tensor({4, 2, 5, 5}, rng, -2, 2);
        BatchNormState<double> st(2);
        Tensor64 y = batchnorm2d(x, st, true);
        for (std::size_t c = 0; c < 2; ++c) {
            double m = 0;
            for (std::size_t b = 0; b < 4; ++b)
                for (std::size_t i = 0; i < 25; ++i) m += y[(b * 2 + c) * 25 + i];
            if (std::abs(m / 100.0) > 1e-4) return std::string("training mean not centered");
        }
        return std::string();
    });
    h.check("layers.interpolate_fixture", [&] {
        Tensor64 q = Tensor64::from_vector({1, 2, 2}, {1, 2, 3, 4});
        Tensor64 o = interpolate_bilinear(q, 4, 4);
        const double expect[16] = {1, 1.25, 1.75, 2,  1.5, 1.75, 2.25, 2.5,
                                   2.5, 2.75, 3.25, 3.5, 3, 3.25, 3.75, 4};
        for (std::size_t i = 0; i < 16; ++i)
            if (std::abs(o[i] - expect[i]) > 1e-12)
                return std::string("2x2 -> 4x4 fixture mismatch");
        return std::string();
    });

    // ---- caga-attention ----
    h.check("attention.oracle", [&] {
        for (int rep = 0; rep < 10; ++rep) {
            Tensor64 q = random_tensor({8, 12}, rng);
            Tensor64 k = random_tensor({8, 12}, rng);
            Tensor64 v = random_tensor({8, 12}, rng);
            if (max_abs_diff(scaled_dot_attention<double>({q, k, v}),
                             oracles::attention_ref(q, k, v)) > 1e-6)
                return std::string("attention disagrees with the loop reference");
        }
        return std::string();
    });
    h.check("attention.structure_toggles", [&] {
        CagaConfig cfg;
        cfg.num_heads = 2;
        cfg.caa.head_dim = 4;
        cfg.caa.d_qkv = 2;
        cfg.caa.dilations = {1, 2};
        auto params = make_caga_block_params<double>(cfg, 5, rng);
        Tensor64 x = random_tensor({5, 8, 8}, rng);
        Tensor64 base = caga_block(x, cfg, params, false);
        CagaConfig nd = cfg;
        nd.caa.cascade_dilations = false;
        CagaConfig nh = cfg;
        nh.cascade_heads = false;
        if (max_abs_diff(base, caga_block(x, nd, params, false)) <= 1e-8)
            return std::string("dilation-cascade toggle had no effect");
        if (max_abs_diff(base, caga_block(x, nh, params, false)) <= 1e-8)
            return std::string("head-cascade toggle had no effect");
        if (caga_param_count(cfg, 5) - caga_param_count(nd, 5) != caga_cascade_param_count(cfg))
            return std::string("parameter delta is not the cascade projections");
        return std::string();
    });
    h.check("attention.block_gradcheck", [&] {
        CagaConfig cfg;
        cfg.num_heads = 2;
        cfg.caa.head_dim = 3;
        cfg.caa.d_qkv = 2;
        cfg.caa.dilations = {1, 2};
        auto params = make_caga_block_params<double>(cfg, 4, rng);
        ParamRegistry<double> reg;
        register_caga_params(params, reg, "blk.");
        Tensor64 x = random_tensor({4, 8, 8}, rng);
        Tensor64 probe = random_tensor({6, 8, 8}, rng);
        std::vector<std::pair<std::string, Tensor64>> leaves{{"input", x}};
        for (auto& [n, p] : reg.params) leaves.emplace_back(n, p);
        return h.grad_check("caga_block", leaves, [&] {
            Tensor64 rm = params.bn.running_mean.deep_copy();
            Tensor64 rv = params.bn.running_var.deep_copy();
            Tensor64 out = caga_block(x, cfg, params, true);
            params.bn.running_mean.values() = rm.values();
            params.bn.running_var.values() = rv.values();
            return sum(mul(out, probe));
        });
    });

    // ---- model ----
    h.check("model.shape_and_predict", [&] {
        ModelConfig mc;
        Model<double> model(mc, kDefaultSeed);
        Tensor64 imgs = Tensor64::zeros({2, 3, 32, 32});
        if (model.forward(imgs).shape() != Shape{2, 4})
            return std::string("logit shape contract violated");
        Tensor64 logits = Tensor64::from_vector({1, 3}, {0.1, 2.0, -1.0});
        if (Model<double>::predict(logits) != std::vector<int>{1})
            return std::string("argmax wrong");
        if (Model<double>::predict(Tensor64::full({1, 3}, 0.5)) != std::vector<int>{0})
            return std::string("tie-break is not lowest-index");
        return std::string();
    });

    // ---- training ----
    h.check("training.focal_reductions", [&] {
        Tensor64 even = Tensor64::from_vector({1, 2}, {0.0, 0.0});
        FocalLossConfig f2{2.0, {1.0, 1.0}};
        if (std::abs(focal_loss(even, {0}, f2).item() - 0.25 * std::log(2.0)) > 1e-12)
            return std::string("focal fixture 0.25*ln2 failed");
        Tensor64 logits = random_tensor({4, 5}, rng, -3, 3);
        FocalLossConfig f0{0.0, {}};
        // gamma=0 must equal cross-entropy
        double ce = 0;
        std::vector<int> targets{0, 2, 4, 1};
        for (std::size_t b = 0; b < 4; ++b) {
            double mx = logits.at({b, 0});
            for (std::size_t c = 1; c < 5; ++c) mx = std::max(mx, logits.at({b, c}));
            double z = 0;
            for (std::size_t c = 0; c < 5; ++c) z += std::exp(logits.at({b, c}) - mx);
            ce -= logits.at({b, static_cast<std::size_t>(targets[b])}) - mx - std::log(z);
        }
        ce /= 4.0;
        if (std::abs(focal_loss(logits, targets, f0).item() - ce) > 1e-9)
            return std::string("gamma=0 focal loss differs from cross-entropy");
        return std::string();
    });
    h.check("training.grad_focal", [&] {
        Tensor64 logits = random_tensor({3, 4}, rng, -2, 2);
        FocalLossConfig cfg{2.0, {}};
        std::vector<int> targets{1, 3, 0};
        return h.grad_check("focal_loss", {{"logits", logits}},
                            [&] { return focal_loss(logits, targets, cfg); });
    });
    h.check("training.adamw_reference", [&] {
        ParamRegistry<double> reg;
        Tensor64& q = reg.add_param("q", Tensor64::from_vector({1}, {0.8}));
        q.grad()[0] = 0.3;
        AdamWState<double> st;
        const double lr = 0.01, b1 = 0.9, b2 = 0.999, eps = 1e-8, wd = 0.05;
        adamw_step(reg, st, AdamWHyper{lr, b1, b2, eps, wd});
        const double m = (1 - b1) * 0.3, v = (1 - b2) * 0.09;
        const double want =
            0.8 * (1 - lr * wd) - lr * (m / (1 - b1)) / (std::sqrt(v / (1 - b2)) + eps);
        if (std::abs(q[0] - want) > 1e-12) return std::string("scalar AdamW step mismatch");
        return std::string();
    });
    h.check("training.kfold_protocol", [&] {
        std::vector<int> labels;
        for (int c = 0; c < 4; ++c) labels.insert(labels.end(), 100, c);
        auto folds = kfold_split(400, 10, kDefaultSeed, labels);
        for (const auto& f : folds)
            if (f.train.size() != 288 || f.val.size() != 72 || f.test.size() != 40)
                return std::string("fold sizes are not 288/72/40");
        return std::string();
    });

    // ---- dataio ----
    h.check("dataio.ppm_roundtrip", [&] {
        namespace fs = std::filesystem;
        const std::string path = (fs::temp_directory_path() / "caga_selftest.ppm").string();
        RawImage img;
        img.width = 3;
        img.height = 2;
        img.rgb = {0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15, 16, 17};
        write_ppm(path, img);
        RawImage back = read_ppm(path);
        fs::remove(path);
        if (back.rgb != img.rgb) return std::string("PPM payload changed in round trip");
        return std::string();
    });
    h.check("dataio.zscore", [&] {
        Dataset<double> train;
        train.class_names = {"a"};
        train.images.push_back(Tensor64::from_vector({3, 1, 2}, {0, 2, 0, 2, 0, 2}));
        train.labels = {0};
        NormStats st = fit_zscore(train);
        if (std::abs(st.mean[0] - 1.0) > 1e-12 || std::abs(st.stddev[0] - 1.0) > 1e-12)
            return std::string("two-point z-score stats wrong");
        Tensor64 norm = apply_zscore_image(train.images[0], st);
        Tensor64 back = unapply_zscore_image(norm, st);
        if (max_abs_diff(back, train.images[0]) > 1e-6)
            return std::string("z-score round trip drifted");
        return std::string();
    });
    h.check("dataio.synth_determinism", [&] {
        Dataset<float> a = synth_dataset<float>(4, 3, 16, kDefaultSeed);
        Dataset<float> b = synth_dataset<float>(4, 3, 16, kDefaultSeed);
        for (std::size_t i = 0; i < a.size(); ++i)
            for (std::size_t j = 0; j < a.images[i].size(); ++j)
                if (a.images[i][j] != b.images[i][j])
                    return std::string("synthetic dataset is not seed-deterministic");
        return std::string();
    });

    // ---- interpret-profile ----
    h.check("interpret.gradcam_fixture", [&] {
        Tensor64 f = Tensor64::from_vector({2, 2, 2}, {1, 2, 3, 4, 4, 3, 2, 1});
        Tensor64 g = Tensor64::from_vector({2, 2, 2}, {0.4, 0.4, 0.4, 0.4, -0.8, 0, 0, 0});
        Tensor64 cam = grad_cam_combine(f, g);
        const double want[4] = {0.0, 0.2, 0.8, 1.4};
        for (std::size_t i = 0; i < 4; ++i)
            if (std::abs(cam[i] - want[i]) > 1e-12)
                return std::string("grad-cam combine fixture mismatch");
        return std::string();
    });
    h.check("interpret.mac_oracle", [&] {
        Tensor64 x = Tensor64::zeros({3, 10, 10});
        Tensor64 w = Tensor64::zeros({8, 3, 3, 3});
        long long count = 0;
        oracles::conv2d_ref(x, w, {}, 1, 1, &count);
        if (count != conv_mac_count(3, 8, 3, 8, 8))
            return std::string("conv MAC formula differs from oracle loop count");
        return std::string();
    });

    // ---- cli ----
    h.check("cli.config_roundtrip", [&] {
        ModelConfig mc;
        TrainConfig tc;
        tc.lr = 3e-3;
        mc.caga.caa.dilations = {1, 3};
        KvFile kv = config_to_kv(mc, tc);
        ModelConfig mc2;
        TrainConfig tc2;
        config_from_kv(KvFile::parse(kv.str()), mc2, tc2);
        if (mc2.caga.caa.dilations != mc.caga.caa.dilations || tc2.lr != tc.lr)
            return std::string("config text round trip changed values");
        return std::string();
    });

    std::printf("%d/%d checks passed\n", h.total - h.failures, h.total);
    return h.failures;
}

} // namespace caga::selftest
