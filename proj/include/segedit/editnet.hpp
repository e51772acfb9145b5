#pragma once

// Toy-scale manipulation network: text encoder, affine combination (ACM), spatial and
// channel attention, the three-stage main module and the detail correction module that
// produces the edited object canvas. Feature maps are (depth, y, x) tensors.

#include "segedit/autograd.hpp"
#include "segedit/error.hpp"
#include "segedit/image.hpp"
#include "segedit/instruction.hpp"
#include "segedit/preproc.hpp"

#include <nlohmann/json.hpp>

#include <array>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <string>
#include <vector>

namespace segedit {

struct EditNetConfig {
    int working_size = 128;
    int channels = 32;      // main module / detail module depth
    int enc_channels = 16;  // frozen image encoder depth
    int disc_channels = 16;
    int embed_dim = 64;     // word vectors from the embedding table
    int text_dim = 32;
    int noise_dim = 16;
    int residual_blocks = 2;

    void validate() const {
        if (working_size < 8 || working_size % 4) throw Error(ErrorKind::parameter, "working_size must be a multiple of 4 and >= 8");
        for (int v : {channels, enc_channels, disc_channels, embed_dim, text_dim, noise_dim})
            if (v < 1 || v > 64) throw Error(ErrorKind::parameter, "network depths must lie in [1, 64]");
        if (residual_blocks < 0) throw Error(ErrorKind::parameter, "residual_blocks must be non-negative");
    }

    friend bool operator==(EditNetConfig const&, EditNetConfig const&) = default;
};

inline nlohmann::json to_json(EditNetConfig const& c) {
    return {{"working_size", c.working_size}, {"channels", c.channels},   {"enc_channels", c.enc_channels},
            {"disc_channels", c.disc_channels}, {"embed_dim", c.embed_dim}, {"text_dim", c.text_dim},
            {"noise_dim", c.noise_dim},         {"residual_blocks", c.residual_blocks}};
}

inline EditNetConfig config_from_json(nlohmann::json const& j) {
    EditNetConfig c;
    c.working_size = j.value("working_size", c.working_size);
    c.channels = j.value("channels", c.channels);
    c.enc_channels = j.value("enc_channels", c.enc_channels);
    c.disc_channels = j.value("disc_channels", c.disc_channels);
    c.embed_dim = j.value("embed_dim", c.embed_dim);
    c.text_dim = j.value("text_dim", c.text_dim);
    c.noise_dim = j.value("noise_dim", c.noise_dim);
    c.residual_blocks = j.value("residual_blocks", c.residual_blocks);
    c.validate();
    return c;
}

/// Named tensors in insertion order.
template <class T>
class ParamStore {
  public:
    ag::Var<T> const& add(std::string const& name, std::vector<int> shape, std::vector<T> values, bool trainable = true) {
        if (index_.contains(name)) throw Error(ErrorKind::parameter, "duplicate parameter " + name);
        auto v = trainable ? ag::parameter<T>(std::move(shape), std::move(values)) : ag::constant<T>(std::move(shape), std::move(values));
        index_[name] = names_.size();
        names_.push_back(name);
        vars_.push_back(v);
        return vars_.back();
    }

    ag::Var<T> const& operator[](std::string const& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw Error(ErrorKind::not_found, "no parameter named " + name);
        return vars_[it->second];
    }
    bool contains(std::string const& name) const { return index_.contains(name); }

    std::vector<std::string> const& names() const noexcept { return names_; }
    std::vector<ag::Var<T>> const& vars() const noexcept { return vars_; }

    /// Parameters whose name starts with `prefix`.
    std::vector<ag::Var<T>> group(std::string const& prefix) const {
        std::vector<ag::Var<T>> out;
        for (size_t i = 0; i < names_.size(); ++i)
            if (names_[i].rfind(prefix, 0) == 0) out.push_back(vars_[i]);
        return out;
    }

    bool all_finite() const {
        for (auto const& v : vars_)
            for (T x : v->value)
                if (!std::isfinite(x)) return false;
        return true;
    }

    /// Deep copy, optionally converting the scalar type.
    template <class U>
    ParamStore<U> cast() const {
        ParamStore<U> out;
        for (size_t i = 0; i < names_.size(); ++i)
            out.add(names_[i], vars_[i]->shape, std::vector<U>(vars_[i]->value.begin(), vars_[i]->value.end()), vars_[i]->requires_grad);
        return out;
    }

  private:
    std::vector<std::string> names_;
    std::vector<ag::Var<T>> vars_;
    std::map<std::string, size_t> index_;
};

namespace detail {

template <class T>
std::vector<T> he_init(std::mt19937_64& rng, size_t n, int fan_in, double gain = 1.0) {
    std::normal_distribution<double> d(0.0, gain * std::sqrt(2.0 / fan_in));
    std::vector<T> v(n);
    for (auto& x : v) x = static_cast<T>(d(rng));
    return v;
}

template <class T>
void add_conv(ParamStore<T>& p, std::mt19937_64& rng, std::string const& name, int out, int in, int k, bool trainable = true,
              double gain = 1.0) {
    p.add(name + ".w", {out, in, k, k}, he_init<T>(rng, static_cast<size_t>(out) * in * k * k, in * k * k, gain), trainable);
    p.add(name + ".b", {out}, std::vector<T>(out, T(0)), trainable);
}

template <class T>
void add_linear(ParamStore<T>& p, std::mt19937_64& rng, std::string const& name, int out, int in, bool trainable = true,
                double gain = 1.0) {
    p.add(name + ".w", {out, in}, he_init<T>(rng, static_cast<size_t>(out) * in, in, gain), trainable);
    p.add(name + ".b", {out}, std::vector<T>(out, T(0)), trainable);
}

template <class T>
ag::Var<T> conv(ParamStore<T> const& p, std::string const& name, ag::Var<T> const& x, int stride = 1) {
    return ag::conv2d(x, p[name + ".w"], p[name + ".b"], stride);
}

template <class T>
ag::Var<T> lin(ParamStore<T> const& p, std::string const& name, ag::Var<T> const& x) {
    return ag::linear(x, p[name + ".w"], p[name + ".b"]);
}

} // namespace detail

/// Generator side: text encoder, main module, detail correction module and the frozen
/// image encoder (also used by the perceptual and word-region losses).
template <class T>
struct GeneratorWeights {
    static constexpr int version = 1;
    EditNetConfig config;
    uint64_t seed = 0;
    ParamStore<T> params;

    static GeneratorWeights init(EditNetConfig const& cfg, uint64_t seed) {
        cfg.validate();
        GeneratorWeights g{cfg, seed, {}};
        std::mt19937_64 rng(seed);
        auto& p = g.params;
        int C = cfg.channels, Ce = cfg.enc_channels, D = cfg.text_dim, E = cfg.embed_dim, S = cfg.working_size;
        int s0 = S / 4;
        detail::add_linear(p, rng, "text.word", D, E);
        detail::add_linear(p, rng, "text.sent", D, D);

        detail::add_conv(p, rng, "enc.c1", Ce, 3, 3, false, 2.0);
        detail::add_conv(p, rng, "enc.c2", Ce, Ce, 3, false);
        detail::add_conv(p, rng, "enc.c3", Ce, Ce, 3, false);
        p.add("damsm.proj", {E, Ce}, detail::he_init<T>(rng, static_cast<size_t>(E) * Ce, Ce), false);

        detail::add_linear(p, rng, "main.fc", C * s0 * s0, cfg.noise_dim + D, true, 0.5);
        for (int k = 1; k <= 3; ++k) {
            std::string st = "main.s" + std::to_string(k);
            detail::add_conv(p, rng, st + ".conv", C, C, 3);
            add_acm(p, rng, st + ".acm", C, Ce);
            detail::add_conv(p, rng, st + ".img", 3, C, 3, true, 0.5);
        }

        detail::add_linear(p, rng, "trdcm.att.sp", C, D);
        detail::add_linear(p, rng, "trdcm.att.ch", S * S, D, true, 0.1);
        detail::add_conv(p, rng, "trdcm.att.mix", C, 3 * C, 1);
        add_acm(p, rng, "trdcm.acm", C, Ce);
        for (int r = 0; r < cfg.residual_blocks; ++r) {
            detail::add_conv(p, rng, "trdcm.res" + std::to_string(r) + ".a", C, C, 3, true, 0.5);
            detail::add_conv(p, rng, "trdcm.res" + std::to_string(r) + ".b", C, C, 3, true, 0.5);
        }
        detail::add_conv(p, rng, "trdcm.head", 3, C + D, 3, true, 0.3);
        return g;
    }

    /// ACM starting as the identity map: scale conv outputs 1, shift conv outputs 0.
    static void add_acm(ParamStore<T>& p, std::mt19937_64& rng, std::string const& name, int C, int Ce) {
        p.add(name + ".scale.w", {C, Ce, 3, 3}, detail::he_init<T>(rng, static_cast<size_t>(C) * Ce * 9, Ce * 9, 0.1));
        p.add(name + ".scale.b", {C}, std::vector<T>(C, T(1)));
        p.add(name + ".shift.w", {C, Ce, 3, 3}, detail::he_init<T>(rng, static_cast<size_t>(C) * Ce * 9, Ce * 9, 0.1));
        p.add(name + ".shift.b", {C}, std::vector<T>(C, T(0)));
    }
};

/// Per-stage discriminators plus one for the detail module. Each has an unconditional
/// real/fake logit and a conditional text-image correlation head.
template <class T>
struct DiscriminatorWeights {
    EditNetConfig config;
    ParamStore<T> params;

    static constexpr char const* heads[4] = {"d1", "d2", "d3", "dtr"};

    static DiscriminatorWeights init(EditNetConfig const& cfg, uint64_t seed) {
        cfg.validate();
        DiscriminatorWeights d{cfg, {}};
        std::mt19937_64 rng(seed ^ 0xD15C0000ull);
        int Cd = cfg.disc_channels, E = cfg.embed_dim;
        for (char const* h : heads) {
            std::string n = h;
            detail::add_conv(d.params, rng, n + ".c1", Cd, 3, 3);
            detail::add_conv(d.params, rng, n + ".c2", 2 * Cd, Cd, 3);
            detail::add_conv(d.params, rng, n + ".c3", 2 * Cd, 2 * Cd, 3);
            detail::add_linear(d.params, rng, n + ".uncond", 1, 2 * Cd, true, 0.5);
            detail::add_linear(d.params, rng, n + ".text", 2 * Cd, E);
            detail::add_linear(d.params, rng, n + ".cond", 1, 4 * Cd, true, 0.5);
        }
        return d;
    }
};

// ---------------------------------------------------------------- tensors <-> images

template <class T>
ag::Var<T> image_tensor(ImageBuffer const& img) {
    int H = img.height(), W = img.width(), C = img.channels();
    std::vector<T> v(static_cast<size_t>(C) * H * W);
    for (int c = 0; c < C; ++c)
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x) v[(static_cast<size_t>(c) * H + y) * W + x] = static_cast<T>(img.at(y, x, c));
    return ag::constant<T>({C, H, W}, std::move(v));
}

template <class T>
ImageBuffer tensor_image(ag::Var<T> const& t) {
    if (t->shape.size() != 3) throw Error(ErrorKind::shape, "expected a (C,H,W) tensor");
    int C = t->dim(0), H = t->dim(1), W = t->dim(2);
    ImageBuffer img(H, W, C);
    for (int c = 0; c < C; ++c)
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x)
                img.at(y, x, c) = std::clamp(static_cast<float>(t->value[(static_cast<size_t>(c) * H + y) * W + x]), 0.0f, 1.0f);
    return img;
}

// ---------------------------------------------------------------- text

template <class T>
struct TextEmbedding {
    ag::Var<T> word_visual;      // (tokens, text_dim)
    ag::Var<T> word_instruction; // (text_dim)
    int token_count = 0;
};

/// Fixed table vectors for the tokens, as a (tokens, embed_dim) matrix.
template <class T>
ag::Var<T> token_matrix(std::vector<std::string> const& tokens, EmbeddingTable const& table) {
    if (tokens.empty()) throw Error(ErrorKind::parameter, "instruction has no tokens");
    std::vector<T> v;
    v.reserve(tokens.size() * table.dim());
    for (auto const& t : tokens)
        for (double x : table.embed(t)) v.push_back(static_cast<T>(x));
    return ag::constant<T>({static_cast<int>(tokens.size()), table.dim()}, std::move(v));
}

/// Rows are encoded independently (so permuting tokens permutes rows); the sentence
/// vector is a projection of their mean.
template <class T>
TextEmbedding<T> encode_tokens(std::vector<std::string> const& tokens, GeneratorWeights<T> const& g, EmbeddingTable const& table) {
    if (table.dim() != g.config.embed_dim) throw Error(ErrorKind::shape, "embedding table dimension does not match the weights");
    auto words = token_matrix<T>(tokens, table);
    TextEmbedding<T> out;
    out.word_visual = ag::tanh(detail::lin(g.params, "text.word", words));
    out.word_instruction = ag::tanh(detail::lin(g.params, "text.sent", ag::mean_rows(out.word_visual)));
    out.token_count = static_cast<int>(tokens.size());
    return out;
}

template <class T>
TextEmbedding<T> encode_text(ParsedInstruction const& instruction, GeneratorWeights<T> const& g, EmbeddingTable const& table) {
    return encode_tokens(instruction.tokens, g, table);
}

// ---------------------------------------------------------------- fusion and attention

/// hidden * Wconv(visual) + Bconv(visual). A visual map of a different spatial size is
/// pooled or upsampled by an integer factor first.
template <class T>
ag::Var<T> acm_fuse(ag::Var<T> const& hidden, ag::Var<T> visual, ParamStore<T> const& p, std::string const& name) {
    if (hidden->shape.size() != 3 || visual->shape.size() != 3) throw Error(ErrorKind::shape, "acm_fuse needs (D,H,W) maps");
    int H = hidden->dim(1), vh = visual->dim(1);
    if (vh > H && vh % H == 0) visual = ag::avg_pool(visual, vh / H);
    else if (vh < H && H % vh == 0) visual = ag::upsample(visual, H / vh);
    if (visual->dim(1) != H || visual->dim(2) != hidden->dim(2)) throw Error(ErrorKind::shape, "acm_fuse: maps cannot be aligned");
    auto w = detail::conv(p, name + ".scale", visual);
    auto b = detail::conv(p, name + ".shift", visual);
    if (w->shape != hidden->shape) throw Error(ErrorKind::shape, "acm_fuse: depth mismatch");
    return ag::add(ag::mul(hidden, w), b);
}

template <class T>
struct Attention {
    ag::Var<T> output;          // (C, H, W)
    ag::Var<T> spatial_weights; // (tokens, H*W); every column sums to 1
    ag::Var<T> channel_weights; // (C, tokens); every row sums to 1
};

/// Spatial attention: each pixel takes a softmax-weighted sum of projected word rows.
/// Channel attention: each channel takes a softmax-weighted sum of word rows projected to
/// the spatial grid. Both are concatenated with `hidden` and mixed back to its depth.
template <class T>
Attention<T> attend(ag::Var<T> const& hidden, TextEmbedding<T> const& text, ParamStore<T> const& p, std::string const& name) {
    if (hidden->shape.size() != 3) throw Error(ErrorKind::shape, "attend needs a (C,H,W) map");
    int C = hidden->dim(0), H = hidden->dim(1), W = hidden->dim(2);
    if (p[name + ".sp.w"]->dim(0) != C) throw Error(ErrorKind::shape, "attend: hidden depth does not match the weights");
    if (p[name + ".ch.w"]->dim(0) != H * W) throw Error(ErrorKind::shape, "attend: hidden size does not match the weights");
    auto flat = ag::reshape(hidden, {C, H * W});
    T temp = T(1) / std::sqrt(static_cast<T>(C));

    auto u = detail::lin(p, name + ".sp", text.word_visual); // (T, C)
    Attention<T> out;
    out.spatial_weights = ag::softmax_cols(ag::scale(ag::matmul(u, flat), temp));
    auto sp = ag::matmul(ag::transpose(u), out.spatial_weights); // (C, HW)

    auto v = detail::lin(p, name + ".ch", text.word_visual); // (T, HW)
    out.channel_weights = ag::softmax_rows(ag::scale(ag::matmul(flat, ag::transpose(v)), T(1) / std::sqrt(static_cast<T>(H * W))));
    auto ch = ag::matmul(out.channel_weights, v); // (C, HW)

    auto cat = ag::concat<T>({hidden, ag::reshape(sp, {C, H, W}), ag::reshape(ch, {C, H, W})});
    out.output = detail::conv(p, name + ".mix", cat);
    return out;
}

// ---------------------------------------------------------------- frozen encoder

template <class T>
struct EncoderFeatures {
    ag::Var<T> f1, f2, f3; // full, 1/2, 1/4 resolution
};

template <class T>
EncoderFeatures<T> encode_image(ag::Var<T> const& img, ParamStore<T> const& p) {
    EncoderFeatures<T> e;
    e.f1 = ag::leaky_relu(detail::conv(p, "enc.c1", img));
    e.f2 = ag::leaky_relu(detail::conv(p, "enc.c2", ag::avg_pool(e.f1, 2)));
    e.f3 = ag::leaky_relu(detail::conv(p, "enc.c3", ag::avg_pool(e.f2, 2)));
    return e;
}

// ---------------------------------------------------------------- main module

template <class T>
struct MainOutput {
    ag::Var<T> h_last;
    std::array<ag::Var<T>, 3> stage_images; // working/4, working/2, working
};

template <class T>
MainOutput<T> main_module_forward(ag::Var<T> const& canvas, TextEmbedding<T> const& text, std::vector<T> const& noise,
                                  GeneratorWeights<T> const& g) {
    auto const& cfg = g.config;
    auto const& p = g.params;
    int S = cfg.working_size, C = cfg.channels, s0 = S / 4;
    if (canvas->shape != std::vector<int>{3, S, S}) throw Error(ErrorKind::shape, "canvas is not at working resolution");
    if (static_cast<int>(noise.size()) != cfg.noise_dim) throw Error(ErrorKind::shape, "noise vector has wrong length");
    auto visual = encode_image(canvas, p).f1;

    auto z = ag::concat<T>({ag::constant<T>({cfg.noise_dim}, noise), text.word_instruction});
    auto h = ag::reshape(ag::leaky_relu(detail::lin(p, "main.fc", z)), {C, s0, s0});
    MainOutput<T> out;
    for (int k = 1; k <= 3; ++k) {
        std::string st = "main.s" + std::to_string(k);
        if (k > 1) h = ag::upsample(h, 2);
        h = ag::leaky_relu(detail::conv(p, st + ".conv", h));
        h = acm_fuse(h, visual, p, st + ".acm");
        out.stage_images[k - 1] = ag::sigmoid(detail::conv(p, st + ".img", h));
    }
    out.h_last = h;
    return out;
}

// ---------------------------------------------------------------- detail correction

/// The target object's class map on the canvas: source pixels sampled at canvas
/// resolution, zero outside the placed crop.
inline SegMap canvas_segmap(SegMap const& seg, CanvasPatch const& patch) {
    int S = patch.image.height();
    SegMap out(S, patch.image.width(), seg.palette());
    double s = patch.canvas_scale;
    for (int y = 0; y < patch.placed_h; ++y)
        for (int x = 0; x < patch.placed_w; ++x) {
            int sy = std::min(patch.source_box.y0 + static_cast<int>(std::floor(y / s)), seg.height() - 1);
            int sx = std::min(patch.source_box.x0 + static_cast<int>(std::floor(x / s)), seg.width() - 1);
            out.set(patch.offset_y + y, patch.offset_x + x, seg.get(sy, sx));
        }
    return out;
}

template <class T>
struct TrdcmOutput {
    ag::Var<T> image; // composited, in [0,1]
    ag::Var<T> raw;   // head output before compositing under the mask
};

template <class T>
TrdcmOutput<T> trdcm_forward(ag::Var<T> const& h_last, TextEmbedding<T> const& text, ag::Var<T> const& canvas,
                             SegMap const& canvas_seg, int target_class, GeneratorWeights<T> const& g) {
    auto const& cfg = g.config;
    auto const& p = g.params;
    int S = cfg.working_size;
    if (canvas->shape != std::vector<int>{3, S, S}) throw Error(ErrorKind::shape, "canvas is not at working resolution");
    if (canvas_seg.height() != S || canvas_seg.width() != S) throw Error(ErrorKind::shape, "segmentation is not at working resolution");
    if (h_last->shape != std::vector<int>{cfg.channels, S, S}) throw Error(ErrorKind::shape, "h_last has the wrong shape");
    std::vector<uint8_t> mask(static_cast<size_t>(S) * S);
    bool any = false;
    for (size_t i = 0; i < mask.size(); ++i) any |= (mask[i] = canvas_seg.ids()[i] == target_class) != 0;
    if (!any) throw Error(ErrorKind::no_target, "segmentation has no pixels of the target class");

    auto a = attend(h_last, text, p, "trdcm.att").output;
    auto v = ag::upsample(encode_image(canvas, p).f2, 2);
    auto r = acm_fuse(a, v, p, "trdcm.acm");
    for (int k = 0; k < cfg.residual_blocks; ++k) {
        std::string n = "trdcm.res" + std::to_string(k);
        r = ag::add(r, detail::conv(p, n + ".b", ag::leaky_relu(detail::conv(p, n + ".a", r))));
    }
    auto cat = ag::concat<T>({r, ag::broadcast_spatial(text.word_instruction, S, S)});
    auto d = ag::tanh(detail::conv(p, "trdcm.head", cat));
    TrdcmOutput<T> out;
    out.raw = ag::residual_head(canvas, d);
    out.image = ag::select(mask, out.raw, canvas);
    return out;
}

// ---------------------------------------------------------------- segmentation actions

/// Attribute and background swap keep the map. Resize replaces the class region by its
/// scaled copy; grown pixels overwrite other classes, vacated pixels become background.
/// Remove clears the class.
inline SegMap apply_action_to_segmap(SegMap const& seg, int target_class, Action const& action) {
    SegMap out = seg;
    auto region = seg.mask_of(target_class);
    switch (action.kind) {
    case ActionKind::attribute:
    case ActionKind::background_swap:
        return out;
    case ActionKind::remove:
        for (auto& id : out.ids())
            if (id == target_class) id = 0;
        return out;
    case ActionKind::resize: {
        if (region.none()) throw Error(ErrorKind::empty_region, "target class has no pixels to resize");
        auto scaled = scale_mask_about_centroid(region, action.factor);
        if (scaled.none()) throw Error(ErrorKind::empty_region, "resized region vanished");
        for (int y = 0; y < seg.height(); ++y)
            for (int x = 0; x < seg.width(); ++x) {
                if (scaled.get(y, x)) out.set(y, x, target_class);
                else if (region.get(y, x)) out.set(y, x, 0);
            }
        return out;
    }
    }
    return out;
}

// ---------------------------------------------------------------- checkpoints

/// File layout: "SEGW" magic, uint32 format version, uint64 manifest length, manifest
/// JSON, then every tensor as little-endian float32 in manifest order.
template <class T>
void save_checkpoint(std::filesystem::path const& path, nlohmann::json meta, std::vector<std::pair<std::string, ParamStore<T> const*>> stores) {
    nlohmann::json tensors = nlohmann::json::array();
    std::vector<float> blob;
    for (auto const& [prefix, store] : stores)
        for (size_t i = 0; i < store->names().size(); ++i) {
            auto const& v = store->vars()[i];
            tensors.push_back({{"name", prefix + store->names()[i]},
                               {"shape", v->shape},
                               {"offset", blob.size()},
                               {"trainable", v->requires_grad}});
            for (T x : v->value) blob.push_back(static_cast<float>(x));
        }
    meta["tensors"] = tensors;
    std::string manifest = meta.dump();
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw Error(ErrorKind::io, "cannot write checkpoint " + path.string());
        uint32_t fmt = 1;
        uint64_t len = manifest.size();
        out.write("SEGW", 4);
        out.write(reinterpret_cast<char const*>(&fmt), sizeof fmt);
        out.write(reinterpret_cast<char const*>(&len), sizeof len);
        out.write(manifest.data(), static_cast<std::streamsize>(manifest.size()));
        out.write(reinterpret_cast<char const*>(blob.data()), static_cast<std::streamsize>(blob.size() * sizeof(float)));
        if (!out) throw Error(ErrorKind::io, "short write to checkpoint " + path.string());
    }
    std::filesystem::rename(tmp, path);
}

struct Checkpoint {
    nlohmann::json manifest;
    std::vector<float> blob;

    static Checkpoint read(std::filesystem::path const& path) {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw Error(ErrorKind::io, "cannot open checkpoint " + path.string());
        char magic[4];
        uint32_t fmt = 0;
        uint64_t len = 0;
        in.read(magic, 4);
        in.read(reinterpret_cast<char*>(&fmt), sizeof fmt);
        in.read(reinterpret_cast<char*>(&len), sizeof len);
        if (!in || std::memcmp(magic, "SEGW", 4) != 0 || fmt != 1 || len > (1u << 26))
            throw Error(ErrorKind::io, path.string() + " is not a weights file");
        std::string manifest(len, '\0');
        in.read(manifest.data(), static_cast<std::streamsize>(len));
        Checkpoint c;
        try {
            c.manifest = nlohmann::json::parse(manifest);
        } catch (nlohmann::json::exception const& e) {
            throw Error(ErrorKind::io, "corrupt checkpoint manifest: " + std::string(e.what()));
        }
        std::vector<char> rest((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
        if (rest.size() % sizeof(float)) throw Error(ErrorKind::io, "truncated checkpoint " + path.string());
        c.blob.resize(rest.size() / sizeof(float));
        std::memcpy(c.blob.data(), rest.data(), rest.size());
        return c;
    }

    /// Copies every tensor named prefix+name into `store`; shapes must match.
    template <class T>
    void load_into(ParamStore<T>& store, std::string const& prefix) const {
        std::map<std::string, nlohmann::json const*> byname;
        for (auto const& t : manifest.at("tensors")) byname[t.at("name").get<std::string>()] = &t;
        for (size_t i = 0; i < store.names().size(); ++i) {
            auto it = byname.find(prefix + store.names()[i]);
            if (it == byname.end()) throw Error(ErrorKind::io, "checkpoint lacks tensor " + prefix + store.names()[i]);
            auto const& v = store.vars()[i];
            if (it->second->at("shape").template get<std::vector<int>>() != v->shape)
                throw Error(ErrorKind::shape, "checkpoint tensor " + it->first + " has the wrong shape");
            size_t off = it->second->at("offset").template get<size_t>();
            if (off + v->size() > blob.size()) throw Error(ErrorKind::io, "checkpoint data is truncated");
            for (size_t k = 0; k < v->size(); ++k) v->value[k] = static_cast<T>(blob[off + k]);
        }
    }
};

template <class T>
void save_weights(std::filesystem::path const& path, GeneratorWeights<T> const& g, DiscriminatorWeights<T> const* d = nullptr,
                  nlohmann::json extra = nlohmann::json::object()) {
    extra["version"] = GeneratorWeights<T>::version;
    extra["seed"] = g.seed;
    extra["config"] = to_json(g.config);
    std::vector<std::pair<std::string, ParamStore<T> const*>> stores{{"g.", &g.params}};
    if (d) stores.push_back({"d.", &d->params});
    save_checkpoint<T>(path, std::move(extra), stores);
}

template <class T>
GeneratorWeights<T> load_generator(std::filesystem::path const& path) {
    auto ck = Checkpoint::read(path);
    if (ck.manifest.value("version", 0) != GeneratorWeights<T>::version) throw Error(ErrorKind::io, "unsupported weights version");
    auto g = GeneratorWeights<T>::init(config_from_json(ck.manifest.at("config")), ck.manifest.value("seed", uint64_t{0}));
    ck.load_into(g.params, "g.");
    if (!g.params.all_finite()) throw Error(ErrorKind::numeric, "weights contain non-finite values");
    return g;
}

template <class T>
DiscriminatorWeights<T> load_discriminator(std::filesystem::path const& path) {
    auto ck = Checkpoint::read(path);
    auto d = DiscriminatorWeights<T>::init(config_from_json(ck.manifest.at("config")), 0);
    ck.load_into(d.params, "d.");
    return d;
}

} // namespace segedit
