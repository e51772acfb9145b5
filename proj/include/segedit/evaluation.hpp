#pragma once

// IS/FID over edited synthetic scenes. Each test scene gets a uniformly sampled target
// color; the edited image is compared against the scene rendered in that color.

#include "segedit/metrics.hpp"
#include "segedit/pipeline.hpp"
#include "segedit/synth.hpp"

#include <nlohmann/json.hpp>

#include <random>

namespace segedit {

struct EvalReport {
    double is = 0;
    double fid = 0;
    double fid_real_real = 0;
    int n = 0;
    uint64_t seed = 0;
    std::string backend;

    nlohmann::json to_json() const {
        return {{"is", is},
                {"fid", fid},
                {"fid_real_real", fid_real_real},
                {"n", n},
                {"seed", seed},
                {"backend", backend},
                {"metrics", {metric_report("is", is, static_cast<size_t>(n), backend, seed), metric_report("fid", fid, static_cast<size_t>(n), backend, seed)}}};
    }
};

inline EvalReport evaluate(Engine const& engine, int n, uint64_t seed, int scene_size = 64) {
    if (n < 1) throw Error(ErrorKind::parameter, "--n must be at least 1");
    auto classifier = ToyClassifier::train(synth::make_synthetic_dataset(400, seed ^ 0xC1A55Full, scene_size), seed);
    auto scenes = synth::make_synthetic_dataset(n, seed + 0x7E57ull, scene_size);
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<int> pick(0, static_cast<int>(synth::palette_colors.size()) - 1);
    std::vector<ImageBuffer> real, generated;
    for (auto const& s : scenes) {
        auto const& obj = s.objects.front();
        int color = pick(rng);
        auto text = "the " + std::string(synth::shape_name(obj.shape)) + " is " + std::string(synth::palette_colors[color].name);
        real.push_back(synth::recolor(s.image, s.seg.mask_of(synth::class_id(obj.shape)), color));
        generated.push_back(engine.edit(s.image, text).output);
    }
    EvalReport r;
    r.n = n;
    r.seed = seed;
    r.backend = classifier.name();
    r.is = inception_score(extract_probabilities(generated, classifier));
    auto fr = extract_features(real, classifier);
    r.fid = frechet_distance(fr, extract_features(generated, classifier));
    r.fid_real_real = frechet_distance(fr, fr);
    return r;
}

} // namespace segedit
