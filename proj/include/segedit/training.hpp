#pragma once

// Losses and the two-phase training loop (main module first, then the detail module
// with the main module frozen) on the synthetic shapes dataset.

#include "segedit/autograd.hpp"
#include "segedit/backends.hpp"
#include "segedit/editnet.hpp"
#include "segedit/error.hpp"
#include "segedit/preproc.hpp"
#include "segedit/synth.hpp"

#include <nlohmann/json.hpp>

#include <array>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <memory>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

namespace segedit {

struct LossWeights {
    double adv = 1, per = 1, cor = 1, damsm = 1, reg = 1;
    friend bool operator==(LossWeights const&, LossWeights const&) = default;
};

struct TrainConfig {
    uint64_t seed = 0;
    double learning_rate = 2e-4;
    int batch_size = 16;
    int epochs_main = 30;
    int epochs_trdcm = 10;
    LossWeights loss_weights;
    int working_size = 128;
    int dataset_size = 500;
    int scene_size = 64;
    EditNetConfig net; // working_size here is overridden by the field above

    void validate() const {
        if (!(learning_rate > 0) || !std::isfinite(learning_rate)) throw Error(ErrorKind::parameter, "learning_rate must be positive");
        if (batch_size < 1) throw Error(ErrorKind::parameter, "batch_size must be positive");
        if (epochs_main < 0 || epochs_trdcm < 0) throw Error(ErrorKind::parameter, "epoch counts must be non-negative");
        for (double w : {loss_weights.adv, loss_weights.per, loss_weights.cor, loss_weights.damsm, loss_weights.reg})
            if (!(w >= 0) || !std::isfinite(w)) throw Error(ErrorKind::parameter, "loss weights must be non-negative");
        if (dataset_size < 1) throw Error(ErrorKind::parameter, "dataset_size must be positive");
        if (working_size < 16 || working_size % 4) throw Error(ErrorKind::parameter, "training needs working_size >= 16, a multiple of 4");
        if (scene_size < 24) throw Error(ErrorKind::parameter, "scene_size must be at least 24");
        network().validate();
    }

    EditNetConfig network() const {
        EditNetConfig n = net;
        n.working_size = working_size;
        return n;
    }
};

inline nlohmann::json to_json(TrainConfig const& c) {
    auto const& w = c.loss_weights;
    return {{"seed", c.seed},
            {"learning_rate", c.learning_rate},
            {"batch_size", c.batch_size},
            {"epochs_main", c.epochs_main},
            {"epochs_trdcm", c.epochs_trdcm},
            {"loss_weights", {{"adv", w.adv}, {"per", w.per}, {"cor", w.cor}, {"damsm", w.damsm}, {"reg", w.reg}}},
            {"working_size", c.working_size},
            {"dataset_size", c.dataset_size},
            {"scene_size", c.scene_size},
            {"net", to_json(c.network())}};
}

/// Unknown keys are rejected so typos do not silently fall back to defaults.
inline TrainConfig train_config_from_json(nlohmann::json const& j) {
    static std::set<std::string> const known{"seed",         "learning_rate", "batch_size",   "epochs_main", "epochs_trdcm",
                                             "loss_weights", "working_size",  "dataset_size", "scene_size",  "net"};
    if (!j.is_object()) throw Error(ErrorKind::parameter, "training config must be a JSON object");
    for (auto const& [k, v] : j.items())
        if (!known.contains(k)) throw Error(ErrorKind::parameter, "unknown training config key '" + k + "'");
    TrainConfig c;
    try {
        c.seed = j.value("seed", c.seed);
        c.learning_rate = j.value("learning_rate", c.learning_rate);
        c.batch_size = j.value("batch_size", c.batch_size);
        c.epochs_main = j.value("epochs_main", c.epochs_main);
        c.epochs_trdcm = j.value("epochs_trdcm", c.epochs_trdcm);
        c.working_size = j.value("working_size", c.working_size);
        c.dataset_size = j.value("dataset_size", c.dataset_size);
        c.scene_size = j.value("scene_size", c.scene_size);
        if (j.contains("loss_weights")) {
            auto const& w = j.at("loss_weights");
            for (auto const& [k, v] : w.items())
                if (k != "adv" && k != "per" && k != "cor" && k != "damsm" && k != "reg")
                    throw Error(ErrorKind::parameter, "unknown loss weight '" + k + "'");
            c.loss_weights.adv = w.value("adv", 1.0);
            c.loss_weights.per = w.value("per", 1.0);
            c.loss_weights.cor = w.value("cor", 1.0);
            c.loss_weights.damsm = w.value("damsm", 1.0);
            c.loss_weights.reg = w.value("reg", 1.0);
        }
        if (j.contains("net")) {
            auto net = j.at("net");
            net["working_size"] = c.working_size;
            c.net = config_from_json(net);
        }
    } catch (nlohmann::json::exception const& e) {
        throw Error(ErrorKind::parameter, std::string("bad training config: ") + e.what());
    }
    c.net.working_size = c.working_size;
    c.validate();
    return c;
}

inline TrainConfig load_train_config(std::filesystem::path const& path) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorKind::io, "cannot open config " + path.string());
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(in);
    } catch (nlohmann::json::exception const& e) {
        throw Error(ErrorKind::parameter, std::string("config is not valid JSON: ") + e.what());
    }
    return train_config_from_json(j);
}

struct TrainingLosses {
    double l_adv = 0, l_per = 0, l_cor = 0, l_damsm = 0, l_reg = 0, l_g = 0, l_d = 0;

    TrainingLosses& operator+=(TrainingLosses const& o) {
        l_adv += o.l_adv, l_per += o.l_per, l_cor += o.l_cor, l_damsm += o.l_damsm, l_reg += o.l_reg, l_g += o.l_g, l_d += o.l_d;
        return *this;
    }
    TrainingLosses scaled(double s) const { return {l_adv * s, l_per * s, l_cor * s, l_damsm * s, l_reg * s, l_g * s, l_d * s}; }
    friend bool operator==(TrainingLosses const&, TrainingLosses const&) = default;
};

// ---------------------------------------------------------------- scalar loss formulas

/// 1 - mean |edited - original| over every channel value.
inline double loss_reg(ImageBuffer const& edited, ImageBuffer const& original) {
    if (!edited.same_shape(original)) throw Error(ErrorKind::shape, "loss_reg: images differ in shape");
    double s = 0;
    for (size_t i = 0; i < edited.size(); ++i) s += std::abs(static_cast<double>(edited.data()[i]) - original.data()[i]);
    return 1.0 - s / static_cast<double>(edited.size());
}

namespace detail {

inline void require_finite(double v, char const* name) {
    if (!std::isfinite(v)) throw Error(ErrorKind::numeric, std::string("non-finite ") + name);
}

} // namespace detail

inline double loss_generator(TrainingLosses const& parts, LossWeights const& w = {}) {
    detail::require_finite(parts.l_adv, "l_adv");
    detail::require_finite(parts.l_per, "l_per");
    detail::require_finite(parts.l_cor, "l_cor");
    detail::require_finite(parts.l_damsm, "l_damsm");
    detail::require_finite(parts.l_reg, "l_reg");
    return w.adv * parts.l_adv + w.per * parts.l_per + w.cor * (1.0 - parts.l_cor) + w.damsm * parts.l_damsm + w.reg * parts.l_reg;
}

inline double loss_discriminator(double l_adv, double cor_matched, double cor_mismatched) {
    detail::require_finite(l_adv, "l_adv");
    detail::require_finite(cor_matched, "cor_matched");
    detail::require_finite(cor_mismatched, "cor_mismatched");
    return l_adv + (1.0 - cor_matched) + cor_mismatched;
}

/// For every caption picks a caption from another batch element that differs from it.
/// When the whole batch shares one caption, the color word is swapped instead.
inline std::vector<std::string> sample_mismatched(std::vector<std::string> const& captions, std::mt19937_64& rng) {
    std::vector<std::string> out(captions.size());
    for (size_t i = 0; i < captions.size(); ++i) {
        std::vector<size_t> pool;
        for (size_t j = 0; j < captions.size(); ++j)
            if (j != i && captions[j] != captions[i]) pool.push_back(j);
        if (!pool.empty()) {
            out[i] = captions[pool[std::uniform_int_distribution<size_t>(0, pool.size() - 1)(rng)]];
            continue;
        }
        auto tokens = segedit::detail::tokenize(captions[i]);
        std::string color = tokens.empty() ? "" : tokens.back();
        int ci = synth::color_index(color);
        int next = (ci < 0 ? 0 : ci + 1 + static_cast<int>(rng() % (synth::palette_colors.size() - 1))) % static_cast<int>(synth::palette_colors.size());
        std::string swapped;
        for (size_t t = 0; t + 1 < tokens.size(); ++t) swapped += tokens[t] + " ";
        swapped += ci < 0 ? tokens.empty() ? "red" : tokens.back() + " red" : std::string(synth::palette_colors[next].name);
        out[i] = swapped;
    }
    return out;
}

// ---------------------------------------------------------------- training data

/// One training example at canvas resolution: the recolored input, the caption-true target
/// and the class map used for compositing.
struct TrainExample {
    ImageBuffer input;
    ImageBuffer target;
    SegMap seg;
    int target_class = 0;
    std::vector<std::string> tokens;
    std::string caption;
};

/// The input canvas shows the target object in a different palette color than the caption says.
inline TrainExample make_example(synth::SynthSample const& s, int working_size, std::mt19937_64& rng) {
    auto const& obj = s.objects.front();
    int cls = synth::class_id(obj.shape);
    auto mask = s.seg.mask_of(cls);
    BilinearSR sr;
    auto target = prepare_canvas(s.image, mask, sr, working_size);
    int shift = 1 + static_cast<int>(rng() % (synth::palette_colors.size() - 1));
    int jitter = (obj.color + shift) % static_cast<int>(synth::palette_colors.size());
    auto input = prepare_canvas(synth::recolor(s.image, mask, jitter), mask, sr, working_size);
    TrainExample ex;
    ex.input = std::move(input.image);
    ex.target = std::move(target.image);
    ex.seg = canvas_segmap(s.seg, target);
    ex.target_class = cls;
    ex.tokens = segedit::detail::tokenize(s.caption);
    ex.caption = s.caption;
    return ex;
}

// ---------------------------------------------------------------- optimizer

template <class T>
class Adam {
  public:
    Adam(double lr, double beta1 = 0.5, double beta2 = 0.999, double eps = 1e-8) : lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {}

    /// Applies grad * grad_scale, then clears the gradients.
    void step(std::vector<ag::Var<T>> const& params, double grad_scale) {
        ++t_;
        double c1 = 1.0 - std::pow(b1_, t_), c2 = 1.0 - std::pow(b2_, t_);
        for (auto const& p : params) {
            auto& st = state_[p.get()];
            if (st.m.size() != p->size()) st.m.assign(p->size(), 0.0), st.v.assign(p->size(), 0.0);
            for (size_t i = 0; i < p->size(); ++i) {
                double g = static_cast<double>(p->grad[i]) * grad_scale;
                st.m[i] = b1_ * st.m[i] + (1 - b1_) * g;
                st.v[i] = b2_ * st.v[i] + (1 - b2_) * g * g;
                p->value[i] -= static_cast<T>(lr_ * (st.m[i] / c1) / (std::sqrt(st.v[i] / c2) + eps_));
            }
            p->zero_grad();
        }
    }

  private:
    struct Moments {
        std::vector<double> m, v;
    };
    double lr_, b1_, b2_, eps_;
    long t_ = 0;
    std::map<ag::Node<T> const*, Moments> state_;
};

// ---------------------------------------------------------------- differentiable losses

template <class T>
struct DiscOut {
    ag::Var<T> uncond; // real/fake logit
    ag::Var<T> cond;   // text-image correlation logit
};

template <class T>
DiscOut<T> discriminate(ag::Var<T> const& img, ag::Var<T> const& sentence, DiscriminatorWeights<T> const& d, std::string const& head) {
    auto const& p = d.params;
    auto h = ag::leaky_relu(detail::conv(p, head + ".c1", img));
    h = ag::leaky_relu(detail::conv(p, head + ".c2", ag::avg_pool(h, 2)));
    h = ag::leaky_relu(detail::conv(p, head + ".c3", ag::avg_pool(h, 2)));
    auto feat = ag::global_avg_pool(h);
    DiscOut<T> out;
    out.uncond = detail::lin(p, head + ".uncond", feat);
    auto text = ag::leaky_relu(detail::lin(p, head + ".text", sentence));
    out.cond = detail::lin(p, head + ".cond", ag::concat<T>({feat, text}));
    return out;
}

/// Mean of the fixed word vectors: the discriminator's view of a caption.
template <class T>
ag::Var<T> sentence_vector(std::vector<std::string> const& tokens, EmbeddingTable const& table) {
    return ag::mean_rows(token_matrix<T>(tokens, table));
}

/// Mean squared difference over pixels and every frozen-encoder layer.
template <class T>
ag::Var<T> perceptual_loss(ag::Var<T> const& fake, ag::Var<T> const& real, ParamStore<T> const& p) {
    auto ef = encode_image(fake, p), er = encode_image(real, p);
    auto l = ag::mean(ag::square(ag::sub(fake, real)));
    l = ag::add(l, ag::mean(ag::square(ag::sub(ef.f1, er.f1))));
    l = ag::add(l, ag::mean(ag::square(ag::sub(ef.f2, er.f2))));
    l = ag::add(l, ag::mean(ag::square(ag::sub(ef.f3, er.f3))));
    return ag::scale(l, T(0.25));
}

/// Word-region matching: every word attends over coarse image regions; the loss is
/// (1 - mean cosine(word, attended context)) / 2, in [0, 1].
template <class T>
ag::Var<T> damsm_loss(ag::Var<T> const& img, std::vector<std::string> const& tokens, ParamStore<T> const& p, EmbeddingTable const& table) {
    auto f = encode_image(img, p).f3;
    int Ce = f->dim(0), N = f->dim(1) * f->dim(2);
    auto regions = ag::matmul(ag::transpose(ag::reshape(f, {Ce, N})), ag::transpose(p["damsm.proj"])); // (N, E)
    auto words = ag::normalize_rows(token_matrix<T>(tokens, table));
    auto sim = ag::matmul(words, ag::transpose(ag::normalize_rows(regions)));
    auto ctx = ag::matmul(ag::softmax_rows(ag::scale(sim, T(5))), regions);
    auto rel = ag::sum(ag::mul(ag::normalize_rows(ctx), words));
    return ag::scale(ag::add_scalar(ag::scale(rel, T(-1) / static_cast<T>(tokens.size())), T(1)), T(0.5));
}

template <class T>
ag::Var<T> reg_loss(ag::Var<T> const& edited, ag::Var<T> const& input) {
    return ag::add_scalar(ag::scale(ag::mean(ag::abs(ag::sub(edited, input))), T(-1)), T(1));
}

template <class T>
struct GenLoss {
    ag::Var<T> total;
    TrainingLosses parts;
};

template <class T>
GenLoss<T> generator_loss(ag::Var<T> const& fake, ag::Var<T> const& real, ag::Var<T> const& input, std::vector<std::string> const& tokens,
                          ag::Var<T> const& sentence, GeneratorWeights<T> const& g, DiscriminatorWeights<T> const& d,
                          std::string const& head, LossWeights const& w, EmbeddingTable const& table) {
    auto dout = discriminate(fake, sentence, d, head);
    auto adv = ag::mean(ag::softplus(ag::scale(dout.uncond, T(-1))));
    auto cor = ag::mean(ag::sigmoid(dout.cond));
    auto per = perceptual_loss(fake, real, g.params);
    auto dam = damsm_loss(fake, tokens, g.params, table);
    auto reg = reg_loss(fake, input);
    GenLoss<T> out;
    out.parts = {adv->value[0], per->value[0], cor->value[0], dam->value[0], reg->value[0], 0, 0};
    out.parts.l_g = loss_generator(out.parts, w);
    auto total = ag::scale(adv, T(w.adv));
    total = ag::add(total, ag::scale(per, T(w.per)));
    total = ag::add(total, ag::scale(ag::add_scalar(ag::scale(cor, T(-1)), T(1)), T(w.cor)));
    total = ag::add(total, ag::scale(dam, T(w.damsm)));
    out.total = ag::add(total, ag::scale(reg, T(w.reg)));
    return out;
}

template <class T>
GenLoss<T> discriminator_loss(ag::Var<T> const& fake, ag::Var<T> const& real, ag::Var<T> const& sentence, ag::Var<T> const& mismatched,
                              DiscriminatorWeights<T> const& d, std::string const& head) {
    auto r = discriminate(real, sentence, d, head);
    auto f = discriminate(ag::detach(fake), sentence, d, head);
    auto adv = ag::add(ag::mean(ag::softplus(ag::scale(r.uncond, T(-1)))), ag::mean(ag::softplus(f.uncond)));
    auto matched = ag::mean(ag::sigmoid(r.cond));
    auto wrong = ag::mean(ag::sigmoid(discriminate(real, mismatched, d, head).cond));
    GenLoss<T> out;
    out.parts.l_d = loss_discriminator(adv->value[0], matched->value[0], wrong->value[0]);
    out.total = ag::add(ag::add(adv, ag::add_scalar(ag::scale(matched, T(-1)), T(1))), wrong);
    return out;
}

// ---------------------------------------------------------------- loop

struct TrainPhaseInfo {
    int epoch = 0;      // 1-based over both phases
    bool trdcm = false; // false: main module phase
};

struct TrainOptions {
    std::filesystem::path out_dir;                 // checkpoints and log.csv; empty disables
    std::function<void(TrainPhaseInfo const&, TrainingLosses const&)> on_epoch;
};

template <class T>
struct TrainResult {
    GeneratorWeights<T> gen;
    DiscriminatorWeights<T> disc;
    std::vector<TrainingLosses> history;
    std::vector<TrainPhaseInfo> phases;
};

inline std::string const& csv_header() {
    static std::string const h = "epoch,l_adv,l_per,l_cor,l_damsm,l_reg,l_g,l_d";
    return h;
}

inline std::string csv_row(int epoch, TrainingLosses const& l) {
    std::ostringstream ss;
    ss << epoch << std::setprecision(9);
    for (double v : {l.l_adv, l.l_per, l.l_cor, l.l_damsm, l.l_reg, l.l_g, l.l_d}) ss << ',' << v;
    return ss.str();
}

namespace detail {

template <class T>
void set_trainable(ParamStore<T> const& p, std::function<bool(std::string const&)> const& pred) {
    for (size_t i = 0; i < p.names().size(); ++i) {
        auto const& v = p.vars()[i];
        v->requires_grad = pred(p.names()[i]);
        v->ensure_grad();
        v->zero_grad();
    }
}

template <class T>
std::vector<ag::Var<T>> trainable(ParamStore<T> const& p) {
    std::vector<ag::Var<T>> out;
    for (auto const& v : p.vars())
        if (v->requires_grad) out.push_back(v);
    return out;
}

inline bool frozen_generator_part(std::string const& name) { return name.rfind("enc.", 0) == 0 || name.rfind("damsm.", 0) == 0; }

template <class T>
std::vector<T> noise_vector(int n, std::mt19937_64& rng) {
    std::normal_distribution<double> d(0.0, 1.0);
    std::vector<T> z(n);
    for (auto& x : z) x = static_cast<T>(d(rng));
    return z;
}

} // namespace detail

/// Runs epochs_main epochs on the main module, then epochs_trdcm on the detail module with
/// the main module frozen. Generator and discriminator steps alternate per batch. A
/// non-finite loss aborts with a numeric error naming the last good checkpoint.
template <class T>
TrainResult<T> train(TrainConfig const& cfg, std::vector<synth::SynthSample> const& dataset, GeneratorWeights<T> gen,
                     DiscriminatorWeights<T> disc, TrainOptions const& opts = {}) {
    cfg.validate();
    if (dataset.empty()) throw Error(ErrorKind::parameter, "training needs a non-empty dataset");
    if (gen.config.working_size != cfg.working_size) throw Error(ErrorKind::shape, "weights were built for another working size");
    auto const table = EmbeddingTable::reference(gen.config.embed_dim);
    // Parameter stores share nodes on copy; train on deep copies so the caller's weights stay put.
    gen.params = gen.params.template cast<T>();
    disc.params = disc.params.template cast<T>();
    TrainResult<T> res{std::move(gen), std::move(disc), {}, {}};
    auto& g = res.gen;
    auto& d = res.disc;

    std::ofstream log;
    std::filesystem::path last_good;
    if (!opts.out_dir.empty()) {
        std::filesystem::create_directories(opts.out_dir);
        log.open(opts.out_dir / "log.csv", std::ios::trunc);
        if (!log) throw Error(ErrorKind::io, "cannot write training log");
        log << csv_header() << '\n' << std::flush;
    }

    int const total_epochs = cfg.epochs_main + cfg.epochs_trdcm;
    int const S = cfg.working_size;
    std::unique_ptr<Adam<T>> opt_g, opt_d;
    for (int epoch = 1; epoch <= total_epochs; ++epoch) {
        bool const phase2 = epoch > cfg.epochs_main;
        if (epoch == 1 || epoch == cfg.epochs_main + 1) {
            detail::set_trainable(g.params, [&](std::string const& n) {
                if (detail::frozen_generator_part(n)) return false;
                return n.rfind("text.", 0) == 0 || n.rfind(phase2 ? "trdcm." : "main.", 0) == 0;
            });
            detail::set_trainable(d.params, [&](std::string const& n) { return phase2 ? n.rfind("dtr.", 0) == 0 : n.rfind("dtr.", 0) != 0; });
        }
        if (epoch == 1 || epoch == cfg.epochs_main + 1) {
            // Optimizer state is fresh per phase and carried across that phase's epochs.
            opt_g = std::make_unique<Adam<T>>(cfg.learning_rate);
            opt_d = std::make_unique<Adam<T>>(cfg.learning_rate);
        }
        auto gparams = detail::trainable(g.params);
        auto dparams = detail::trainable(d.params);

        std::mt19937_64 rng(cfg.seed * 0x2545F4914F6CDD1Dull + static_cast<uint64_t>(epoch));
        std::vector<size_t> order(dataset.size());
        std::iota(order.begin(), order.end(), size_t{0});
        std::shuffle(order.begin(), order.end(), rng);

        TrainingLosses epoch_sum;
        size_t count = 0;
        for (size_t start = 0; start < order.size(); start += static_cast<size_t>(cfg.batch_size)) {
            size_t stop = std::min(order.size(), start + static_cast<size_t>(cfg.batch_size));
            std::vector<TrainExample> batch;
            std::vector<std::string> captions;
            for (size_t k = start; k < stop; ++k) {
                batch.push_back(make_example(dataset[order[k]], S, rng));
                captions.push_back(batch.back().caption);
            }
            auto wrong = sample_mismatched(captions, rng);

            for (size_t b = 0; b < batch.size(); ++b) {
                auto const& ex = batch[b];
                auto input = image_tensor<T>(ex.input);
                auto target = image_tensor<T>(ex.target);
                auto sentence = sentence_vector<T>(ex.tokens, table);
                auto mismatched = sentence_vector<T>(segedit::detail::tokenize(wrong[b]), table);
                auto text = encode_tokens(ex.tokens, g, table);
                auto z = detail::noise_vector<T>(g.config.noise_dim, rng);

                std::vector<ag::Var<T>> fakes, reals, inputs;
                std::vector<std::string> heads;
                if (!phase2) {
                    auto mm = main_module_forward(input, text, z, g);
                    for (int k = 0; k < 3; ++k) {
                        int f = 4 >> k;
                        fakes.push_back(mm.stage_images[k]);
                        reals.push_back(ag::avg_pool(target, f));
                        inputs.push_back(ag::avg_pool(input, f));
                        heads.push_back("d" + std::to_string(k + 1));
                    }
                } else {
                    TextEmbedding<T> frozen{ag::detach(text.word_visual), ag::detach(text.word_instruction), text.token_count};
                    auto h = ag::detach(main_module_forward(input, frozen, z, g).h_last);
                    fakes.push_back(trdcm_forward(h, text, input, ex.seg, ex.target_class, g).image);
                    reals.push_back(target);
                    inputs.push_back(input);
                    heads.push_back("dtr");
                }

                TrainingLosses sample;
                T const inv = T(1) / static_cast<T>(fakes.size());
                ag::Var<T> dtotal;
                for (size_t k = 0; k < fakes.size(); ++k) {
                    auto dl = discriminator_loss(fakes[k], reals[k], sentence, mismatched, d, heads[k]);
                    dtotal = dtotal ? ag::add(dtotal, dl.total) : dl.total;
                    sample.l_d += dl.parts.l_d / fakes.size();
                }
                if (!std::isfinite(static_cast<double>(dtotal->value[0])))
                    throw Error(ErrorKind::numeric, "non-finite discriminator loss at epoch " + std::to_string(epoch) +
                                                        (last_good.empty() ? "" : "; last good checkpoint " + last_good.string()));
                ag::backward(ag::scale(dtotal, inv));

                for (auto const& p : dparams) p->requires_grad = false;
                ag::Var<T> gtotal;
                for (size_t k = 0; k < fakes.size(); ++k) {
                    auto gl = generator_loss(fakes[k], reals[k], inputs[k], ex.tokens, sentence, g, d, heads[k], cfg.loss_weights, table);
                    gtotal = gtotal ? ag::add(gtotal, gl.total) : gl.total;
                    auto part = gl.parts.scaled(1.0 / fakes.size());
                    part.l_d = 0;
                    sample += part;
                }
                for (auto const& p : dparams) p->requires_grad = true;
                if (!std::isfinite(static_cast<double>(gtotal->value[0])) || !std::isfinite(sample.l_g))
                    throw Error(ErrorKind::numeric, "non-finite generator loss at epoch " + std::to_string(epoch) +
                                                        (last_good.empty() ? "" : "; last good checkpoint " + last_good.string()));
                ag::backward(ag::scale(gtotal, inv));
                epoch_sum += sample;
                ++count;
            }
            double scale = 1.0 / static_cast<double>(batch.size());
            opt_d->step(dparams, scale);
            opt_g->step(gparams, scale);
        }

        auto mean = epoch_sum.scaled(1.0 / static_cast<double>(count));
        res.history.push_back(mean);
        res.phases.push_back({epoch, phase2});
        if (!g.params.all_finite() || !d.params.all_finite())
            throw Error(ErrorKind::numeric, "weights became non-finite at epoch " + std::to_string(epoch) +
                                                (last_good.empty() ? "" : "; last good checkpoint " + last_good.string()));
        if (!opts.out_dir.empty()) {
            std::ostringstream name;
            name << "epoch_" << std::setw(3) << std::setfill('0') << epoch << ".segw";
            save_weights(opts.out_dir / name.str(), g, &d, {{"epoch", epoch}, {"train_config", to_json(cfg)}});
            last_good = opts.out_dir / name.str();
            log << csv_row(epoch, mean) << '\n' << std::flush;
        }
        if (opts.on_epoch) opts.on_epoch(res.phases.back(), mean);
    }
    detail::set_trainable(g.params, [](std::string const& n) { return !detail::frozen_generator_part(n); });
    detail::set_trainable(d.params, [](std::string const&) { return true; });
    if (!opts.out_dir.empty()) save_weights(opts.out_dir / "weights.segw", g, &d, {{"epoch", total_epochs}, {"train_config", to_json(cfg)}});
    return res;
}

// ---------------------------------------------------------------- inference helpers

/// Runs main module + detail module on a prepared canvas with zero noise.
template <class T>
ImageBuffer edit_canvas(GeneratorWeights<T> const& g, ImageBuffer const& canvas, SegMap const& canvas_seg, int target_class,
                        std::vector<std::string> const& tokens, EmbeddingTable const& table) {
    auto input = image_tensor<T>(canvas);
    auto text = encode_tokens(tokens, g, table);
    auto mm = main_module_forward(input, text, std::vector<T>(g.config.noise_dim, T(0)), g);
    return tensor_image(trdcm_forward(mm.h_last, text, input, canvas_seg, target_class, g).image);
}

struct ColorCheck {
    int cases = 0;
    int passed = 0;
    double rate() const { return cases ? static_cast<double>(passed) / cases : 0.0; }
};

/// Held-out scenes whose target is painted in a color without a dominant red channel,
/// edited with "the <shape> is red". A case passes when the mean red value inside the
/// object exceeds the mean green and mean blue values.
template <class T>
ColorCheck red_edit_check(GeneratorWeights<T> const& g, int n, uint64_t seed, int scene_size = 64) {
    auto const table = EmbeddingTable::reference(g.config.embed_dim);
    std::vector<int> start_colors;
    for (size_t c = 0; c < synth::palette_colors.size(); ++c) {
        auto const& rgb = synth::palette_colors[c].rgb;
        if (!(rgb[0] > rgb[1] && rgb[0] > rgb[2])) start_colors.push_back(static_cast<int>(c));
    }
    ColorCheck out;
    std::mt19937_64 rng(seed ^ 0x5EEDC0105ull);
    auto scenes = synth::make_synthetic_dataset(n, seed, scene_size);
    BilinearSR sr;
    for (auto const& s : scenes) {
        auto const& obj = s.objects.front();
        int cls = synth::class_id(obj.shape);
        auto mask = s.seg.mask_of(cls);
        int color = start_colors[rng() % start_colors.size()];
        auto patch = prepare_canvas(synth::recolor(s.image, mask, color), mask, sr, g.config.working_size);
        auto cseg = canvas_segmap(s.seg, patch);
        auto tokens = segedit::detail::tokenize("the " + std::string(synth::shape_name(obj.shape)) + " is red");
        auto edited = edit_canvas(g, patch.image, cseg, cls, tokens, table);
        std::array<double, 3> sum{};
        int count = 0;
        for (int y = 0; y < edited.height(); ++y)
            for (int x = 0; x < edited.width(); ++x)
                if (cseg.get(y, x) == cls) {
                    for (int c = 0; c < 3; ++c) sum[c] += edited.at(y, x, c);
                    ++count;
                }
        ++out.cases;
        if (count > 0 && sum[0] > sum[1] && sum[0] > sum[2]) ++out.passed;
    }
    return out;
}

} // namespace segedit
