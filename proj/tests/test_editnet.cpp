#include "segedit/editnet.hpp"
#include "test_util.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <random>

using namespace segedit;
using ag::Var;

namespace {

EditNetConfig tiny(int size = 8) {
    EditNetConfig c;
    c.working_size = size;
    c.channels = 4;
    c.enc_channels = 3;
    c.disc_channels = 2;
    c.text_dim = 5;
    c.noise_dim = 3;
    return c;
}

Var<double> rand_tensor(std::mt19937& rng, std::vector<int> shape, double lo = -1, double hi = 1) {
    std::uniform_real_distribution<double> u(lo, hi);
    std::vector<double> v(ag::shape_size(shape));
    for (auto& x : v) x = u(rng);
    return ag::constant<double>(std::move(shape), std::move(v));
}

void fill(Var<double> const& v, double x) { std::fill(v->value.begin(), v->value.end(), x); }

Var<double> probe(Var<double> const& y) {
    std::mt19937 rng(11);
    std::uniform_real_distribution<double> u(-1, 1);
    std::vector<double> w(y->size());
    for (auto& x : w) x = u(rng);
    return ag::sum(ag::mul(y, ag::constant<double>(y->shape, w)));
}

EmbeddingTable const& table() {
    static EmbeddingTable t = EmbeddingTable::reference(64);
    return t;
}

} // namespace

TEST(EncodeText, DeterministicShapesAndPermutation) {
    auto g = GeneratorWeights<double>::init(tiny(), 1);
    auto a = encode_tokens<double>({"the", "circle", "is", "red"}, g, table());
    auto b = encode_tokens<double>({"the", "circle", "is", "red"}, g, table());
    EXPECT_EQ(a.word_visual->value, b.word_visual->value);
    EXPECT_EQ(a.word_instruction->value, b.word_instruction->value);
    EXPECT_EQ(a.word_visual->shape, (std::vector<int>{4, 5}));

    auto one = encode_tokens<double>({"square"}, g, table());
    EXPECT_EQ(one.word_visual->dim(0), 1);
    EXPECT_EQ(one.token_count, 1);

    // Every row equals the encoding of that token alone, so permutations permute rows.
    std::vector<std::string> perm{"red", "is", "the", "circle"};
    auto p = encode_tokens<double>(perm, g, table());
    for (int r = 0; r < 4; ++r) {
        auto solo = encode_tokens<double>({perm[r]}, g, table());
        for (int j = 0; j < 5; ++j) EXPECT_NEAR(p.word_visual->value[r * 5 + j], solo.word_visual->value[j], 1e-12);
    }
    EXPECT_THROW(encode_tokens<double>({}, g, table()), Error);
    ParsedInstruction empty;
    EXPECT_THROW(encode_text(empty, g, table()), Error);
}

TEST(AcmFuse, IdentityZeroHiddenAndOracle) {
    std::mt19937 rng(2);
    auto g = GeneratorWeights<double>::init(tiny(), 2);
    auto& p = g.params;
    std::string n = "main.s1.acm";
    auto hidden = rand_tensor(rng, {4, 8, 8});
    auto visual = rand_tensor(rng, {3, 8, 8});

    auto out = acm_fuse(hidden, visual, p, n);
    auto w = ag::conv2d(visual, p[n + ".scale.w"], p[n + ".scale.b"]);
    auto b = ag::conv2d(visual, p[n + ".shift.w"], p[n + ".shift.b"]);
    for (size_t i = 0; i < out->size(); ++i) EXPECT_NEAR(out->value[i], hidden->value[i] * w->value[i] + b->value[i], 1e-12);

    auto zero = acm_fuse(ag::zeros<double>({4, 8, 8}), visual, p, n);
    EXPECT_EQ(zero->value, b->value);

    fill(p[n + ".scale.w"], 0);
    fill(p[n + ".scale.b"], 1);
    fill(p[n + ".shift.w"], 0);
    fill(p[n + ".shift.b"], 0);
    EXPECT_EQ(acm_fuse(hidden, visual, p, n)->value, hidden->value);

    // A visual map at twice the resolution is pooled into alignment; odd ratios are rejected.
    EXPECT_NO_THROW(acm_fuse(hidden, rand_tensor(rng, {3, 16, 16}), p, n));
    EXPECT_THROW(acm_fuse(hidden, rand_tensor(rng, {3, 12, 12}), p, n), Error);
}

TEST(Attend, SoftmaxContracts) {
    std::mt19937 rng(3);
    auto g = GeneratorWeights<double>::init(tiny(), 3);
    auto hidden = rand_tensor(rng, {4, 8, 8});

    auto single = encode_tokens<double>({"red"}, g, table());
    auto a1 = attend(hidden, single, g.params, "trdcm.att");
    for (double v : a1.spatial_weights->value) EXPECT_EQ(v, 1.0);
    for (double v : a1.channel_weights->value) EXPECT_EQ(v, 1.0);
    EXPECT_EQ(a1.output->shape, hidden->shape);

    auto three = encode_tokens<double>({"the", "red", "circle"}, g, table());
    fill(g.params["trdcm.att.sp.w"], 0);
    fill(g.params["trdcm.att.sp.b"], 0);
    auto a3 = attend(hidden, three, g.params, "trdcm.att");
    for (double v : a3.spatial_weights->value) EXPECT_NEAR(v, 1.0 / 3.0, 1e-15);
}

TEST(Attend, TwoTokenOracle) {
    std::mt19937 rng(4);
    auto g = GeneratorWeights<double>::init(tiny(), 4);
    auto hidden = rand_tensor(rng, {4, 8, 8});
    auto text = encode_tokens<double>({"blue", "square"}, g, table());
    auto a = attend(hidden, text, g.params, "trdcm.att");
    auto const& p = g.params;
    int C = 4, HW = 64, T = 2, D = 5;
    auto proj = [&](std::string const& name, int rows) {
        std::vector<double> out(static_cast<size_t>(T) * rows);
        for (int t = 0; t < T; ++t)
            for (int r = 0; r < rows; ++r) {
                double s = p[name + ".b"]->value[r];
                for (int k = 0; k < D; ++k) s += p[name + ".w"]->value[r * D + k] * text.word_visual->value[t * D + k];
                out[t * rows + r] = s;
            }
        return out;
    };
    auto u = proj("trdcm.att.sp", C);
    auto v = proj("trdcm.att.ch", HW);
    for (int px = 0; px < HW; ++px) {
        double l[2];
        for (int t = 0; t < T; ++t) {
            l[t] = 0;
            for (int c = 0; c < C; ++c) l[t] += u[t * C + c] * hidden->value[c * HW + px];
            l[t] /= std::sqrt(double(C));
        }
        double m = std::max(l[0], l[1]), e0 = std::exp(l[0] - m), e1 = std::exp(l[1] - m);
        EXPECT_NEAR(a.spatial_weights->value[px], e0 / (e0 + e1), 1e-12);
        EXPECT_NEAR(a.spatial_weights->value[HW + px], e1 / (e0 + e1), 1e-12);
    }
    for (int c = 0; c < C; ++c) {
        double l[2];
        for (int t = 0; t < T; ++t) {
            l[t] = 0;
            for (int px = 0; px < HW; ++px) l[t] += hidden->value[c * HW + px] * v[t * HW + px];
            l[t] /= std::sqrt(double(HW));
        }
        double m = std::max(l[0], l[1]), e0 = std::exp(l[0] - m), e1 = std::exp(l[1] - m);
        EXPECT_NEAR(a.channel_weights->value[c * 2], e0 / (e0 + e1), 1e-12);
        EXPECT_NEAR(a.channel_weights->value[c * 2 + 1], e1 / (e0 + e1), 1e-12);
    }
}

TEST(EditNetGradients, AcmAttentionAndHead) {
    std::mt19937 rng(5);
    auto g = GeneratorWeights<double>::init(tiny(), 5);
    auto& p = g.params;
    constexpr double tol = 1e-3;

    auto hidden = rand_tensor(rng, {4, 8, 8});
    auto visual = rand_tensor(rng, {3, 8, 8});
    std::string n = "trdcm.acm";
    auto acm = ag::gradient_check<double>({hidden, visual, p[n + ".scale.w"], p[n + ".scale.b"], p[n + ".shift.w"], p[n + ".shift.b"]},
                                          [&] { return probe(acm_fuse(hidden, visual, p, n)); });
    EXPECT_LT(acm.max_rel_error, tol);

    TextEmbedding<double> text;
    text.word_visual = rand_tensor(rng, {2, 5});
    text.word_instruction = rand_tensor(rng, {5});
    text.token_count = 2;
    auto att = ag::gradient_check<double>({hidden, text.word_visual, p["trdcm.att.sp.w"], p["trdcm.att.ch.w"], p["trdcm.att.mix.w"]},
                                          [&] { return probe(attend(hidden, text, p, "trdcm.att").output); });
    EXPECT_LT(att.max_rel_error, tol);

    auto canvas = rand_tensor(rng, {3, 8, 8}, 0.05, 0.95);
    SegMap seg(8, 8, {{1, "circle"}});
    for (int y = 2; y < 7; ++y)
        for (int x = 1; x < 6; ++x) seg.set(y, x, 1);
    auto head = ag::gradient_check<double>({p["trdcm.head.w"], p["trdcm.head.b"], hidden, text.word_instruction},
                                           [&] { return probe(trdcm_forward(hidden, text, canvas, seg, 1, g).image); });
    EXPECT_LT(head.max_rel_error, tol);
    EXPECT_GT(head.probes, 0u);
}

TEST(MainModule, ShapesDeterminismAndNoise) {
    auto cfg = tiny(128);
    auto g = GeneratorWeights<float>::init(cfg, 6);
    auto canvas = image_tensor<float>(test_support::solid(128, 128, 0.2f, 0.5f, 0.7f));
    auto text = encode_tokens<float>({"the", "square", "is", "red"}, g, table());
    std::vector<float> z0(3, 0.0f), z1{1.0f, 0.0f, 0.0f};
    auto a = main_module_forward(canvas, text, z0, g);
    auto b = main_module_forward(canvas, text, z0, g);
    auto c = main_module_forward(canvas, text, z1, g);
    std::array<int, 3> dims{32, 64, 128};
    for (int k = 0; k < 3; ++k) {
        EXPECT_EQ(a.stage_images[k]->shape, (std::vector<int>{3, dims[k], dims[k]}));
        EXPECT_EQ(a.stage_images[k]->value, b.stage_images[k]->value);
        for (float v : a.stage_images[k]->value) {
            EXPECT_GE(v, 0.0f);
            EXPECT_LE(v, 1.0f);
        }
    }
    EXPECT_NE(a.stage_images[0]->value, c.stage_images[0]->value);
    EXPECT_EQ(a.h_last->shape, (std::vector<int>{4, 128, 128}));
    EXPECT_THROW(main_module_forward(image_tensor<float>(ImageBuffer(64, 64)), text, z0, g), Error);
}

TEST(Trdcm, MaskConfinementIdentityAndNoTarget) {
    std::mt19937 rng(7);
    auto cfg = tiny(16);
    auto g = GeneratorWeights<double>::init(cfg, 7);
    auto canvas = rand_tensor(rng, {3, 16, 16}, 0, 1);
    auto text = encode_tokens<double>({"the", "circle", "is", "green"}, g, table());
    auto h = main_module_forward(canvas, text, std::vector<double>(3, 0.1), g).h_last;

    for (int trial = 0; trial < 20; ++trial) {
        SegMap seg(16, 16, {{1, "circle"}, {2, "square"}});
        std::uniform_int_distribution<int> id(0, 2);
        for (auto& v : seg.ids()) v = id(rng);
        auto out = trdcm_forward(h, text, canvas, seg, 1, g);
        bool changed = false;
        for (int c = 0; c < 3; ++c)
            for (int i = 0; i < 256; ++i) {
                double o = out.image->value[c * 256 + i], in = canvas->value[c * 256 + i];
                if (seg.ids()[i] != 1) EXPECT_EQ(o, in);
                else changed |= o != in;
                EXPECT_GE(o, 0.0);
                EXPECT_LE(o, 1.0);
            }
        EXPECT_TRUE(changed);
    }

    SegMap seg(16, 16, {{1, "circle"}});
    seg.set(5, 5, 1);
    fill(g.params["trdcm.head.w"], 0);
    fill(g.params["trdcm.head.b"], 0);
    EXPECT_EQ(trdcm_forward(h, text, canvas, seg, 1, g).image->value, canvas->value);
    EXPECT_THROW(trdcm_forward(h, text, canvas, seg, 2, g), Error);
    try {
        trdcm_forward(h, text, canvas, seg, 2, g);
    } catch (Error const& e) {
        EXPECT_EQ(e.kind(), ErrorKind::no_target);
    }
}

TEST(ApplyAction, SegmapTransforms) {
    SegMap seg(64, 64, {{1, "circle"}, {2, "square"}});
    for (int y = 24; y < 40; ++y)
        for (int x = 24; x < 40; ++x) seg.set(y, x, 1);
    for (int y = 42; y < 50; ++y)
        for (int x = 30; x < 34; ++x) seg.set(y, x, 2);

    EXPECT_EQ(apply_action_to_segmap(seg, 1, Action::attribute()), seg);
    EXPECT_EQ(apply_action_to_segmap(seg, 1, Action::background_swap()), seg);

    auto removed = apply_action_to_segmap(seg, 1, Action::remove());
    EXPECT_EQ(removed.mask_of(1).area(), 0u);
    EXPECT_EQ(removed.mask_of(2), seg.mask_of(2));
    EXPECT_EQ(apply_action_to_segmap(removed, 1, Action::remove()), removed);

    auto grown = apply_action_to_segmap(seg, 1, Action::resize(2.0));
    double area = static_cast<double>(grown.mask_of(1).area());
    EXPECT_NEAR(area / (4.0 * 256.0), 1.0, 0.10);
    // Growth wins over the neighbouring square.
    EXPECT_LT(grown.mask_of(2).area(), seg.mask_of(2).area());

    auto shrunk = apply_action_to_segmap(seg, 1, Action::resize(0.5));
    EXPECT_EQ(shrunk.mask_of(1).area(), 64u);
    EXPECT_EQ(shrunk.get(24, 24), 0);
    EXPECT_THROW(apply_action_to_segmap(seg, 3, Action::resize(2.0)), Error);
}

TEST(Checkpoint, RoundTripAndCorruption) {
    auto dir = std::filesystem::temp_directory_path() / "segedit_ckpt_test";
    std::filesystem::create_directories(dir);
    auto g = GeneratorWeights<float>::init(tiny(16), 9);
    auto d = DiscriminatorWeights<float>::init(tiny(16), 9);
    save_weights(dir / "w.segw", g, &d);
    auto g2 = load_generator<float>(dir / "w.segw");
    auto d2 = load_discriminator<float>(dir / "w.segw");
    EXPECT_EQ(g2.config, g.config);
    ASSERT_EQ(g2.params.names(), g.params.names());
    for (size_t i = 0; i < g.params.vars().size(); ++i) EXPECT_EQ(g2.params.vars()[i]->value, g.params.vars()[i]->value);
    for (size_t i = 0; i < d.params.vars().size(); ++i) EXPECT_EQ(d2.params.vars()[i]->value, d.params.vars()[i]->value);

    auto manifest = Checkpoint::read(dir / "w.segw").manifest;
    EXPECT_EQ(manifest["version"], 1);
    EXPECT_EQ(manifest["config"]["working_size"], 16);

    {
        std::ofstream bad(dir / "bad.segw", std::ios::binary);
        bad << "not weights";
    }
    EXPECT_THROW(load_generator<float>(dir / "bad.segw"), Error);
    EXPECT_THROW(load_generator<float>(dir / "missing.segw"), Error);
    std::filesystem::remove_all(dir);
}
