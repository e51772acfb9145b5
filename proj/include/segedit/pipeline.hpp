#pragma once

// End-to-end edit: parse -> segment/detect -> canvas -> generator -> restore -> combine -> seam.

#include "segedit/backends.hpp"
#include "segedit/combiner.hpp"
#include "segedit/editnet.hpp"
#include "segedit/instruction.hpp"
#include "segedit/preproc.hpp"
#include "segedit/training.hpp"

#include <nlohmann/json.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <memory>
#include <optional>
#include <string>

namespace segedit {

struct BackendSet {
    std::shared_ptr<SegmentationBackend const> segmentation;
    std::shared_ptr<DetectionBackend const> detection;
    std::shared_ptr<SRBackend const> sr;
    std::shared_ptr<InpaintBackend const> inpaint;
};

/// "toy" or "external:<command>". Inpainting is always wrapped so a backend that touches
/// pixels outside the hole is caught.
inline BackendSet make_backends(std::string const& spec) {
    if (spec == "toy")
        return {std::make_shared<ToySegmentation>(), std::make_shared<ToyDetection>(), std::make_shared<BilinearSR>(),
                std::make_shared<CheckedInpaint>(std::make_shared<DiffusionInpaint>())};
    static constexpr std::string_view ext = "external:";
    if (spec.rfind(ext, 0) == 0 && spec.size() > ext.size()) {
        auto cmd = spec.substr(ext.size());
        return {std::make_shared<ExternalSegmentation>(cmd), std::make_shared<ExternalDetection>(cmd), std::make_shared<ExternalSR>(cmd),
                std::make_shared<CheckedInpaint>(std::make_shared<ExternalInpaint>(cmd))};
    }
    throw Error(ErrorKind::parameter, "unknown backend '" + spec + "' (expected toy or external:<command>)");
}

struct EngineConfig {
    std::string weights;
    std::string backend = "toy";
    std::string listen = "127.0.0.1:8080";
    std::string session_root = "sessions";
    int seam_band = 2;
    std::string lexicon; // optional extra noun list, one per line

    void validate() const {
        if (seam_band < 1) throw Error(ErrorKind::parameter, "seam_band must be at least 1");
    }
};

inline EngineConfig engine_config_from_json(nlohmann::json const& j) {
    EngineConfig c;
    if (!j.is_object()) throw Error(ErrorKind::parameter, "engine config must be a JSON object");
    for (auto const& [k, v] : j.items())
        if (k != "weights" && k != "backend" && k != "listen" && k != "session_root" && k != "seam_band" && k != "lexicon")
            throw Error(ErrorKind::parameter, "unknown engine config key '" + k + "'");
    try {
        c.weights = j.value("weights", c.weights);
        c.backend = j.value("backend", c.backend);
        c.listen = j.value("listen", c.listen);
        c.session_root = j.value("session_root", c.session_root);
        c.seam_band = j.value("seam_band", c.seam_band);
        c.lexicon = j.value("lexicon", c.lexicon);
    } catch (nlohmann::json::exception const& e) {
        throw Error(ErrorKind::parameter, std::string("bad engine config: ") + e.what());
    }
    return c;
}

/// SEGEDIT_WEIGHTS, SEGEDIT_BACKEND, SEGEDIT_LISTEN, SEGEDIT_SESSION_ROOT, SEGEDIT_SEAM_BAND, SEGEDIT_LEXICON.
inline EngineConfig apply_env_overrides(EngineConfig c) {
    auto env = [](char const* name) -> std::optional<std::string> {
        char const* v = std::getenv(name);
        return v && *v ? std::optional<std::string>(v) : std::nullopt;
    };
    if (auto v = env("SEGEDIT_WEIGHTS")) c.weights = *v;
    if (auto v = env("SEGEDIT_BACKEND")) c.backend = *v;
    if (auto v = env("SEGEDIT_LISTEN")) c.listen = *v;
    if (auto v = env("SEGEDIT_SESSION_ROOT")) c.session_root = *v;
    if (auto v = env("SEGEDIT_LEXICON")) c.lexicon = *v;
    if (auto v = env("SEGEDIT_SEAM_BAND")) {
        try {
            c.seam_band = std::stoi(*v);
        } catch (std::exception const&) {
            throw Error(ErrorKind::parameter, "SEGEDIT_SEAM_BAND is not an integer");
        }
    }
    return c;
}

inline EngineConfig load_engine_config(std::filesystem::path const& path) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorKind::io, "cannot open config " + path.string());
    try {
        return engine_config_from_json(nlohmann::json::parse(in));
    } catch (nlohmann::json::parse_error const& e) {
        throw Error(ErrorKind::parameter, std::string("config is not valid JSON: ") + e.what());
    }
}

struct EditResult {
    ImageBuffer output;
    SegMap seg_used;
    SegMap seg_out;
    ParsedInstruction instruction;
    std::string target;
    int target_class = 0;
    double score = 0;
    bool low_confidence = false;
    MaskMap target_mask; // text-relevant region in the input
    MaskMap target_out;  // region after the action
};

inline nlohmann::json edit_report(EditResult const& r) {
    return {{"action", std::string(to_string(r.instruction.action.kind))},
            {"factor", r.instruction.action.factor},
            {"target", r.target},
            {"target_class", r.target_class},
            {"score", r.score},
            {"low_confidence", r.low_confidence},
            {"target_area_in", r.target_mask.area()},
            {"target_area_out", r.target_out.area()},
            {"target_class_pixels_out", r.seg_out.mask_of(r.target_class).area()}};
}

class Engine {
  public:
    Engine(GeneratorWeights<float> weights, BackendSet backends, int seam_band = 2)
        : weights_(std::move(weights)), backends_(std::move(backends)), table_(EmbeddingTable::reference(weights_.config.embed_dim)),
          seam_band_(seam_band) {
        if (seam_band_ < 1) throw Error(ErrorKind::parameter, "seam band must be at least 1");
        // Inference never backpropagates; skip gradient bookkeeping.
        for (auto const& v : weights_.params.vars()) v->requires_grad = false;
    }

    static Engine load(EngineConfig const& cfg) {
        cfg.validate();
        if (cfg.weights.empty()) throw Error(ErrorKind::parameter, "no weights configured");
        Engine e(load_generator<float>(cfg.weights), make_backends(cfg.backend), cfg.seam_band);
        if (!cfg.lexicon.empty()) e.lexicon_.add_file(cfg.lexicon);
        return e;
    }

    BackendSet const& backends() const noexcept { return backends_; }
    GeneratorWeights<float> const& weights() const noexcept { return weights_; }
    Lexicon& lexicon() noexcept { return lexicon_; }

    SegMap segment(ImageBuffer const& image) const {
        if (!image.is_valid()) throw Error(ErrorKind::parameter, "input image is empty or out of range", "input");
        return with_stage("segmentation", [&] {
            auto s = backends_.segmentation->segment(image);
            if (!s.same_shape(image)) throw Error(ErrorKind::backend, "segmentation has wrong dimensions");
            return s;
        });
    }

    /// Target selection without editing: what a new session shows the user.
    std::pair<SegMap, std::string> locate(ImageBuffer const& image, std::string const& text) const {
        auto seg = segment(image);
        auto inst = with_stage("parse", [&] { return parse_instruction(text, lexicon_for(seg)); });
        auto dets = with_stage("detection", [&] { return backends_.detection->detect(image); });
        if (dets.empty()) throw Error(ErrorKind::no_target, "no objects detected", "detection");
        auto pre = preprocess_with_seg(image, with_fallback(inst, dets, ""), seg, dets, *backends_.sr, table_, weights_.config.working_size);
        return {std::move(pre.seg), pre.target};
    }

    /// `seg_override` bypasses segmentation and detection. `fallback_target` names the
    /// object when the instruction itself names none (e.g. a bare "remove").
    EditResult edit(ImageBuffer const& image, std::string const& text, SegMap const* seg_override = nullptr,
                    ImageBuffer const* background = nullptr, std::string const& fallback_target = "") const {
        if (!image.is_valid()) throw Error(ErrorKind::parameter, "input image is empty or out of range", "input");
        SegMap seg;
        std::vector<DetectedObject> dets;
        if (seg_override) {
            if (!seg_override->same_shape(image)) throw Error(ErrorKind::shape, "segmentation map does not match the image", "input");
            seg_override->validate();
            seg = *seg_override;
            dets = detections_from_seg(seg);
        } else {
            seg = segment(image);
            dets = with_stage("detection", [&] { return backends_.detection->detect(image); });
        }
        auto inst = with_stage("parse", [&] { return parse_instruction(text, lexicon_for(seg), background != nullptr); });

        EditResult r;
        r.seg_used = seg;
        r.instruction = inst;
        auto const& action = inst.action;

        if (action.kind == ActionKind::background_swap && !background)
            throw Error(ErrorKind::parameter, "background swap needs a reference background", "input");

        if (action.kind == ActionKind::background_swap && inst.nouns.empty() && fallback_target.empty()) {
            // Keep every object; only the background changes.
            r.target_mask = object_mask(seg);
            if (r.target_mask.none()) throw Error(ErrorKind::empty_region, "no objects to keep in front of the new background", "mask");
            r.target = "objects";
            r.target_out = r.target_mask;
            r.seg_out = seg;
            auto bg = prepare_bg(*background, image);
            auto split = split_by_mask(image, r.target_mask);
            auto combined = with_stage("combination", [&] { return combine_final(image, split, r.target_out, action, &bg, *backends_.inpaint); });
            r.output = absorb_color_seam(combined, r.target_out, seam_band_, *backends_.inpaint);
            return r;
        }

        if (dets.empty()) throw Error(ErrorKind::no_target, "no objects detected", "detection");
        auto pre = preprocess_with_seg(image, with_fallback(inst, dets, fallback_target), seg, dets, *backends_.sr, table_,
                                       weights_.config.working_size);
        r.target = pre.target;
        r.score = pre.selection.score;
        r.low_confidence = pre.selection.low_confidence;
        r.target_mask = pre.split.mask;
        for (auto const& d : pre.detections)
            if (d.label == pre.target) r.target_class = d.class_id;

        ImageBuffer edited = image;
        switch (action.kind) {
        case ActionKind::attribute:
        case ActionKind::background_swap: {
            SegMap cseg(pre.canvas.mask.height(), pre.canvas.mask.width(), seg.palette());
            for (int y = 0; y < cseg.height(); ++y)
                for (int x = 0; x < cseg.width(); ++x)
                    if (pre.canvas.mask.get(y, x)) cseg.set(y, x, r.target_class);
            auto canvas = with_stage("manipulation", [&] {
                return edit_canvas(weights_, pre.canvas.image, cseg, r.target_class, inst.tokens, table_);
            });
            edited = restore_from_canvas(canvas, pre.canvas, image);
            r.target_out = r.target_mask;
            r.seg_out = seg;
            break;
        }
        case ActionKind::resize: {
            auto [cy, cx] = mask_centroid(r.target_mask);
            r.target_out = scale_mask_about_centroid(r.target_mask, action.factor);
            if (r.target_out.none()) throw Error(ErrorKind::empty_region, "resized object vanished", "manipulation");
            edited = restore_from_canvas(pre.canvas.image, pre.canvas, image, action.factor, cy, cx);
            r.seg_out = seg;
            for (int y = 0; y < seg.height(); ++y)
                for (int x = 0; x < seg.width(); ++x) {
                    if (r.target_out.get(y, x)) r.seg_out.set(y, x, r.target_class);
                    else if (r.target_mask.get(y, x)) r.seg_out.set(y, x, 0);
                }
            break;
        }
        case ActionKind::remove:
            r.target_out = MaskMap(image.height(), image.width());
            r.seg_out = seg;
            for (int y = 0; y < seg.height(); ++y)
                for (int x = 0; x < seg.width(); ++x)
                    if (r.target_mask.get(y, x)) r.seg_out.set(y, x, 0);
            break;
        }

        std::optional<BackgroundAsset> bg;
        if (action.kind == ActionKind::background_swap) bg = prepare_bg(*background, image);
        auto combined = with_stage("combination", [&] {
            return combine_final(edited, pre.split, r.target_out, action, bg ? &*bg : nullptr, *backends_.inpaint);
        });
        r.output = absorb_color_seam(combined, r.target_out, seam_band_, *backends_.inpaint);
        return r;
    }

  private:
    Lexicon lexicon_for(SegMap const& seg) const {
        Lexicon lex = lexicon_;
        for (auto const& [id, label] : seg.palette()) lex.add(label);
        return lex;
    }

    static ParsedInstruction with_fallback(ParsedInstruction inst, std::vector<DetectedObject> const& dets, std::string const& fallback) {
        if (!inst.nouns.empty()) return inst;
        if (!fallback.empty()) {
            inst.nouns.push_back(fallback);
            return inst;
        }
        std::set<std::string> labels;
        for (auto const& d : dets) labels.insert(d.label);
        if (labels.size() == 1) inst.nouns.push_back(*labels.begin());
        else if (labels.size() > 1) throw Error(ErrorKind::no_target, "instruction names no object and the image holds several", "selection");
        return inst;
    }

    BackgroundAsset prepare_bg(ImageBuffer const& background, ImageBuffer const& image) const {
        if (!background.is_valid()) throw Error(ErrorKind::parameter, "background image is empty or out of range", "input");
        auto bg = background.same_shape(image) ? background : resize_image(background, image.height(), image.width(), ResizeMethod::bilinear);
        return prepare_background(bg, *backends_.segmentation, *backends_.inpaint);
    }

    GeneratorWeights<float> weights_;
    BackendSet backends_;
    EmbeddingTable table_;
    Lexicon lexicon_;
    int seam_band_;
};

} // namespace segedit
