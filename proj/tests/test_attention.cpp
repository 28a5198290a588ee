#include <doctest.h>

#include "caga/attention.hpp"
#include "caga/oracles.hpp"

using namespace caga;

namespace {

Tensor<double> random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    Tensor<double> t = Tensor<double>::zeros(std::move(shape));
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(lo, hi);
    return t;
}

double max_abs_diff(const Tensor<double>& a, const Tensor<double>& b) {
    REQUIRE(a.shape() == b.shape());
    double m = 0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

CagaConfig tiny_config() {
    CagaConfig cfg;
    cfg.num_heads = 2;
    cfg.caa.head_dim = 4;
    cfg.caa.d_qkv = 2;
    cfg.caa.dilations = {1, 2};
    return cfg;
}

// Mirrors one CAA branch out of the layer primitives, used to rebuild
// caa_forward outputs piece by piece.
Tensor<double> branch_map(const Tensor<double>& branch_in, const CaaConfig& cfg, int dil_idx,
                          const CaaHeadParams<double>& p, std::size_t H, std::size_t W) {
    ConvSpec qkv{.in_channels = cfg.head_dim, .out_channels = 3 * cfg.d_qkv,
                 .kernel = cfg.kernel, .stride = cfg.stride,
                 .dilation = cfg.dilations[static_cast<std::size_t>(dil_idx)],
                 .padding = Padding::valid, .bias = false};
    Tensor<double> t = conv2d(branch_in, qkv, p.qkv_conv_w[static_cast<std::size_t>(dil_idx)]);
    ConvSpec pt{.in_channels = 3 * cfg.d_qkv, .out_channels = 3 * cfg.d_qkv, .kernel = 1,
                .bias = false};
    t = conv2d(t, pt, p.qkv_point_w[static_cast<std::size_t>(dil_idx)]);
    const std::size_t dq = static_cast<std::size_t>(cfg.d_qkv);
    const std::size_t bh = t.extent(1), bw = t.extent(2);
    Tensor<double> flat = reshape(t, {3 * dq, bh * bw});
    AttentionTriple<double> triple{slice(flat, 0, 0, dq), slice(flat, 0, dq, dq),
                                   slice(flat, 0, 2 * dq, dq)};
    Tensor<double> attn = scaled_dot_attention(triple);
    return interpolate_bilinear(reshape(attn, {dq, bh, bw}), H, W);
}

} // namespace

TEST_CASE("scaled_dot_attention trivial cases") {
    // Q = K = 0: uniform weights, every output position is the mean of V
    Tensor<double> q = Tensor<double>::zeros({2, 4});
    Tensor<double> k = Tensor<double>::zeros({2, 4});
    Tensor<double> v = Tensor<double>::from_vector({2, 4}, {1, 2, 3, 4, 5, 6, 7, 8});
    Tensor<double> out = scaled_dot_attention<double>({q, k, v});
    for (std::size_t j = 0; j < 4; ++j) {
        CHECK(out.at({0, j}) == doctest::Approx(2.5));
        CHECK(out.at({1, j}) == doctest::Approx(6.5));
    }

    // S = 1: output equals V
    Rng rng(20);
    Tensor<double> q1 = random_tensor({3, 1}, rng);
    Tensor<double> k1 = random_tensor({3, 1}, rng);
    Tensor<double> v1 = random_tensor({3, 1}, rng);
    CHECK(max_abs_diff(scaled_dot_attention<double>({q1, k1, v1}), v1) < 1e-12);
}

TEST_CASE("scaled_dot_attention matches the naive loop reference") {
    Rng rng(21);
    for (int rep = 0; rep < 20; ++rep) {
        Tensor<double> q = random_tensor({8, 12}, rng);
        Tensor<double> k = random_tensor({8, 12}, rng);
        Tensor<double> v = random_tensor({8, 12}, rng);
        CHECK(max_abs_diff(scaled_dot_attention<double>({q, k, v}),
                           oracles::attention_ref(q, k, v)) < 1e-6);
    }
}

TEST_CASE("attention weight rows are stochastic") {
    Rng rng(22);
    Tensor<double> q = random_tensor({4, 9}, rng);
    Tensor<double> k = random_tensor({4, 9}, rng);
    Tensor<double> w = softmax_rows(
        scale(matmul(transpose2d(q), k), 1.0 / std::sqrt(4.0)));
    for (std::size_t i = 0; i < 9; ++i) {
        double s = 0;
        for (std::size_t j = 0; j < 9; ++j) s += w.at({i, j});
        CHECK(s == doctest::Approx(1.0).epsilon(1e-6));
    }
}

TEST_CASE("attention triple shape contract") {
    Tensor<double> q = Tensor<double>::zeros({2, 4});
    Tensor<double> k = Tensor<double>::zeros({2, 5});
    CHECK_THROWS_AS(scaled_dot_attention<double>({q, k, q}), ShapeError);
}

TEST_CASE("caa_forward shape contract at paper defaults") {
    Rng rng(82);
    CagaConfig cfg;  // h=16, d_qkv=8, dilations {1,2,3}, k=3, s=1
    auto params = make_caga_block_params<double>(cfg, 32, rng);
    Tensor<double> x = random_tensor({16, 14, 14}, rng);
    Tensor<double> y = caa_forward(x, cfg.caa, params.heads[0]);
    CHECK(y.shape() == Shape{16, 14, 14});
}

TEST_CASE("single dilation makes the cascade toggle a no-op") {
    Rng rng(23);
    CagaConfig cfg = tiny_config();
    cfg.caa.dilations = {1};
    cfg.caa.cascade_dilations = true;
    auto params = make_caga_block_params<double>(cfg, 4, rng);
    Tensor<double> x = random_tensor({4, 8, 8}, rng);
    Tensor<double> on = caa_forward(x, cfg.caa, params.heads[0]);
    CaaConfig off_cfg = cfg.caa;
    off_cfg.cascade_dilations = false;
    Tensor<double> off = caa_forward(x, off_cfg, params.heads[0]);
    CHECK(max_abs_diff(on, off) == 0.0);
}

TEST_CASE("caa_forward equals the hand-composed primitive pipeline") {
    Rng rng(24);
    CagaConfig cfg = tiny_config();

    SUBCASE("cascade off") {
        cfg.caa.cascade_dilations = false;
        auto params = make_caga_block_params<double>(cfg, 4, rng);
        Tensor<double> x = random_tensor({4, 9, 9}, rng);
        Tensor<double> got = caa_forward(x, cfg.caa, params.heads[0]);

        std::vector<Tensor<double>> maps;
        for (int di = 0; di < 2; ++di)
            maps.push_back(branch_map(x, cfg.caa, di, params.heads[0], 9, 9));
        ConvSpec proj{.in_channels = 2 * cfg.caa.d_qkv, .out_channels = cfg.caa.head_dim,
                      .kernel = 1, .bias = true};
        Tensor<double> want = conv2d(concat(maps, 0), proj, params.heads[0].out_proj_w,
                                     params.heads[0].out_proj_b);
        CHECK(max_abs_diff(got, want) < 1e-6);
    }

    SUBCASE("cascade on feeds the projected previous attention forward") {
        cfg.caa.cascade_dilations = true;
        auto params = make_caga_block_params<double>(cfg, 4, rng);
        Tensor<double> x = random_tensor({4, 9, 9}, rng);
        Tensor<double> got = caa_forward(x, cfg.caa, params.heads[0]);
        const auto& hp = params.heads[0];
        const std::size_t dq = 2;

        // branch 1 on the raw input, keep its pre-interpolation attention map
        ConvSpec qkv1{.in_channels = 4, .out_channels = 6, .kernel = 3, .dilation = 1,
                      .bias = false};
        Tensor<double> t = conv2d(x, qkv1, hp.qkv_conv_w[0]);
        ConvSpec pt{.in_channels = 6, .out_channels = 6, .kernel = 1, .bias = false};
        t = conv2d(t, pt, hp.qkv_point_w[0]);
        const std::size_t bh = t.extent(1), bw = t.extent(2);
        Tensor<double> flat = reshape(t, {6, bh * bw});
        Tensor<double> attn1 = scaled_dot_attention<double>(
            {slice(flat, 0, 0, dq), slice(flat, 0, dq, dq), slice(flat, 0, 2 * dq, dq)});
        Tensor<double> attn1_map = reshape(attn1, {dq, bh, bw});

        // branch 2 input: x + upsampled 1x1-projected previous attention
        ConvSpec cp{.in_channels = 2, .out_channels = 4, .kernel = 1, .bias = true};
        Tensor<double> casc = conv2d(attn1_map, cp, hp.cascade_w[0], hp.cascade_b[0]);
        Tensor<double> branch2_in = add(x, interpolate_bilinear(casc, 9, 9));

        std::vector<Tensor<double>> maps;
        maps.push_back(interpolate_bilinear(attn1_map, 9, 9));
        maps.push_back(branch_map(branch2_in, cfg.caa, 1, hp, 9, 9));
        ConvSpec proj{.in_channels = 4, .out_channels = 4, .kernel = 1, .bias = true};
        Tensor<double> want = conv2d(concat(maps, 0), proj, hp.out_proj_w, hp.out_proj_b);
        CHECK(max_abs_diff(got, want) < 1e-6);
    }
}

TEST_CASE("caa_forward names the offending dilation when the input is too small") {
    Rng rng(25);
    CagaConfig cfg;  // dilations {1,2,3} -> max k_eff 7
    auto params = make_caga_block_params<double>(cfg, 48, rng);
    Tensor<double> x = random_tensor({16, 6, 6}, rng);
    CHECK_THROWS_WITH_AS(caa_forward(x, cfg.caa, params.heads[0]),
                         doctest::Contains("dilation 3"), ShapeError);
}

TEST_CASE("cga_forward with one head is exactly x + Proj(CAA(x))") {
    Rng rng(26);
    CagaConfig cfg = tiny_config();
    cfg.num_heads = 1;
    auto params = make_caga_block_params<double>(cfg, 4, rng);
    Tensor<double> x = random_tensor({4, 8, 8}, rng);
    Tensor<double> got = cga_forward(x, cfg, params);

    Tensor<double> caa = caa_forward(x, cfg.caa, params.heads[0]);
    ConvSpec proj{.in_channels = 4, .out_channels = 4, .kernel = 1, .bias = true};
    Tensor<double> want = add(x, conv2d(caa, proj, params.final_proj_w, params.final_proj_b));
    CHECK(max_abs_diff(got, want) == 0.0);

    // cascade_heads has no effect for n = 1
    CagaConfig off = cfg;
    off.cascade_heads = false;
    CHECK(max_abs_diff(cga_forward(x, off, params), got) == 0.0);
}

TEST_CASE("cga_forward shape preservation and channel contract") {
    Rng rng(82);
    CagaConfig cfg;  // n=3, h=16
    auto params = make_caga_block_params<double>(cfg, 48, rng);
    Tensor<double> x = random_tensor({48, 14, 14}, rng);
    CHECK(cga_forward(x, cfg, params).shape() == Shape{48, 14, 14});

    Tensor<double> bad = random_tensor({47, 14, 14}, rng);
    CHECK_THROWS_AS(cga_forward(bad, cfg, params), ConfigError);
}

TEST_CASE("cga_forward without head cascade equals independent per-head assembly") {
    Rng rng(27);
    CagaConfig cfg = tiny_config();
    cfg.cascade_heads = false;
    auto params = make_caga_block_params<double>(cfg, 8, rng);
    Tensor<double> x = random_tensor({8, 8, 8}, rng);
    Tensor<double> got = cga_forward(x, cfg, params);

    std::vector<Tensor<double>> heads;
    for (int i = 0; i < 2; ++i)
        heads.push_back(caa_forward(slice(x, 0, static_cast<std::size_t>(i) * 4, 4), cfg.caa,
                                    params.heads[static_cast<std::size_t>(i)]));
    ConvSpec proj{.in_channels = 8, .out_channels = 8, .kernel = 1, .bias = true};
    Tensor<double> want =
        add(x, conv2d(concat(heads, 0), proj, params.final_proj_w, params.final_proj_b));
    CHECK(max_abs_diff(got, want) < 1e-12);
}

TEST_CASE("caga_block shape contract and BN-identity reduction") {
    Rng rng(82);
    CagaConfig cfg;
    auto params = make_caga_block_params<double>(cfg, 32, rng);
    Tensor<double> x = random_tensor({32, 14, 14}, rng);
    Tensor<double> y = caga_block(x, cfg, params, false);
    CHECK(y.shape() == Shape{48, 14, 14});

    // eval-mode BN with identity affine and (0,1) running stats: block equals
    // cga_forward of the DSConv reduction, up to the epsilon inside 1/sqrt(1+eps)
    Tensor<double> want = cga_forward(caga_input_reduction(x, cfg, params), cfg, params);
    CHECK(max_abs_diff(y, want) < 1e-4);
}

TEST_CASE("caga_block full finite-difference gradient check") {
    Rng rng(28);
    CagaConfig cfg = tiny_config();
    auto params = make_caga_block_params<double>(cfg, 5, rng);
    ParamRegistry<double> reg;
    register_caga_params(params, reg, "blk.");
    Tensor<double> x = random_tensor({5, 8, 8}, rng);
    Tensor<double> probe = random_tensor({8, 8, 8}, rng);

    std::vector<std::pair<std::string, Tensor<double>>> leaves{{"input", x}};
    for (auto& [name, p] : reg.params) leaves.emplace_back(name, p);
    auto fd = oracles::finite_diff_check(leaves, [&] {
        Tensor<double> rm = params.bn.running_mean.deep_copy();
        Tensor<double> rv = params.bn.running_var.deep_copy();
        Tensor<double> out = caga_block(x, cfg, params, true);
        params.bn.running_mean.values() = rm.values();
        params.bn.running_var.values() = rv.values();
        return sum(mul(out, probe));
    });
    INFO("worst: " << fd.worst);
    CHECK(fd.max_err < 1e-4);
}

TEST_CASE("gradient reaches every trainable array") {
    Rng rng(29);
    CagaConfig cfg = tiny_config();
    auto params = make_caga_block_params<double>(cfg, 5, rng);
    ParamRegistry<double> reg;
    register_caga_params(params, reg, "blk.");
    Tensor<double> x = random_tensor({5, 8, 8}, rng);
    Tensor<double> probe = random_tensor({8, 8, 8}, rng);
    Tape<double> tape;
    {
        Tape<double>::Scope scope(tape);
        tape.backward(sum(mul(caga_block(x, cfg, params, true), probe)));
    }
    for (auto& [name, p] : reg.params) {
        bool nonzero = false;
        for (double g : p.grad())
            if (g != 0.0) {
                nonzero = true;
                break;
            }
        INFO(name);
        CHECK(nonzero);
    }
}

TEST_CASE("caga_param_count equals enumeration for several configs") {
    Rng rng(30);
    std::vector<CagaConfig> cfgs;
    cfgs.push_back(CagaConfig{});  // defaults
    CagaConfig c2 = tiny_config();
    cfgs.push_back(c2);
    CagaConfig c3 = tiny_config();
    c3.caa.cascade_dilations = false;
    cfgs.push_back(c3);
    CagaConfig c4;
    c4.num_heads = 6;
    cfgs.push_back(c4);
    for (const auto& cfg : cfgs)
        for (int cin : {5, 32}) {
            auto params = make_caga_block_params<double>(cfg, cin, rng);
            ParamRegistry<double> reg;
            register_caga_params(params, reg, "");
            INFO("cin=" << cin << " heads=" << cfg.num_heads);
            CHECK(caga_param_count(cfg, cin) ==
                  static_cast<long long>(reg.param_count()));
        }
}

TEST_CASE("doubling heads doubles the head-local parameter share") {
    Rng rng(31);
    CagaConfig cfg;  // n = 3
    CagaConfig cfg2 = cfg;
    cfg2.num_heads = 6;
    auto head_local = [&rng](const CagaConfig& c) {
        auto params = make_caga_block_params<double>(c, 16, rng);
        ParamRegistry<double> reg;
        register_caga_params(params, reg, "");
        long long total = 0;
        for (auto& [name, p] : reg.params)
            if (name.rfind("head", 0) == 0) total += static_cast<long long>(p.size());
        return total;
    };
    CHECK(head_local(cfg2) == 2 * head_local(cfg));
}

TEST_CASE("empty dilation list is rejected") {
    CagaConfig cfg;
    cfg.caa.dilations.clear();
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    CHECK_THROWS_AS(caga_param_count(cfg, 8), ConfigError);
}

TEST_CASE("cascade toggles change the output; parameter deltas are the projections") {
    Rng rng(32);
    CagaConfig cfg = tiny_config();  // 2 heads, 2 dilations, cascades on
    auto params = make_caga_block_params<double>(cfg, 5, rng);
    Tensor<double> x = random_tensor({5, 8, 8}, rng);
    Tensor<double> base = caga_block(x, cfg, params, false);

    CagaConfig no_dil = cfg;
    no_dil.caa.cascade_dilations = false;
    Tensor<double> without_dil = caga_block(x, no_dil, params, false);
    CHECK(max_abs_diff(base, without_dil) > 1e-8);

    CagaConfig no_heads = cfg;
    no_heads.cascade_heads = false;
    Tensor<double> without_heads = caga_block(x, no_heads, params, false);
    CHECK(max_abs_diff(base, without_heads) > 1e-8);

    // parameter totals differ only by the cascade projection arrays
    CHECK(caga_param_count(cfg, 5) - caga_param_count(no_dil, 5) ==
          caga_cascade_param_count(cfg));
    CHECK(caga_param_count(cfg, 5) == caga_param_count(no_heads, 5));
    // enumerate the projection arrays directly
    long long proj = 0;
    for (const auto& head : params.heads) {
        for (const auto& w : head.cascade_w) proj += static_cast<long long>(w.size());
        for (const auto& b : head.cascade_b) proj += static_cast<long long>(b.size());
    }
    CHECK(proj == caga_cascade_param_count(cfg));
}

TEST_CASE("fixed seed 82 reproduces initialization and outputs bit for bit") {
    CagaConfig cfg = tiny_config();
    Rng r1(82), r2(82);
    auto p1 = make_caga_block_params<double>(cfg, 5, r1);
    auto p2 = make_caga_block_params<double>(cfg, 5, r2);
    for (std::size_t i = 0; i < p1.ds_point_w.size(); ++i)
        CHECK(p1.ds_point_w[i] == p2.ds_point_w[i]);

    Rng rx1(7), rx2(7);
    Tensor<double> x1 = random_tensor({5, 8, 8}, rx1);
    Tensor<double> x2 = random_tensor({5, 8, 8}, rx2);
    Tensor<double> y1 = caga_block(x1, cfg, p1, false);
    Tensor<double> y2 = caga_block(x2, cfg, p2, false);
    for (std::size_t i = 0; i < y1.size(); ++i) CHECK(y1[i] == y2[i]);
}
