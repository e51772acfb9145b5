#pragma once

// Combination phase: fill the vacated region, optionally swap in a cleaned reference
// background, composite the edited object under the output mask, then repaint a thin
// band along the object outline to hide color seams.

#include "segedit/backends.hpp"
#include "segedit/error.hpp"
#include "segedit/image.hpp"
#include "segedit/instruction.hpp"

#include <optional>
#include <vector>

namespace segedit {

/// Onion-peel diffusion fill: each ring of hole pixels adjacent to known pixels takes the
/// mean of its known 8-neighbors, ring by ring inward; then `iterations` Jacobi smoothing
/// passes over the hole. Only hole pixels change. A hole covering the whole image is
/// filled with the image's global mean.
inline ImageBuffer inpaint_reference(ImageBuffer const& image, MaskMap const& hole, int iterations = 0) {
    if (hole.height() != image.height() || hole.width() != image.width())
        throw Error(ErrorKind::shape, "inpaint: hole and image dimensions differ");
    if (iterations < 0) throw Error(ErrorKind::parameter, "iterations must be non-negative");
    int const h = image.height(), w = image.width(), ch = image.channels();
    ImageBuffer out = image;
    std::vector<uint8_t> known(static_cast<size_t>(h) * w);
    std::vector<std::pair<int, int>> pending;
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            known[static_cast<size_t>(y) * w + x] = !hole.get(y, x);
            if (hole.get(y, x)) pending.emplace_back(y, x);
        }
    if (pending.empty()) return out;

    if (pending.size() == known.size()) {
        std::vector<double> mean(ch, 0.0);
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x)
                for (int c = 0; c < ch; ++c) mean[c] += image.at(y, x, c);
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x)
                for (int c = 0; c < ch; ++c) out.at(y, x, c) = static_cast<float>(mean[c] / (static_cast<double>(h) * w));
        return out;
    }

    std::vector<double> acc(ch);
    struct Fill {
        int y, x;
        std::vector<float> v;
    };
    while (!pending.empty()) {
        std::vector<Fill> ring;
        std::vector<std::pair<int, int>> rest;
        for (auto [y, x] : pending) {
            std::fill(acc.begin(), acc.end(), 0.0);
            int n = 0;
            for (int dy = -1; dy <= 1; ++dy)
                for (int dx = -1; dx <= 1; ++dx) {
                    int ny = y + dy, nx = x + dx;
                    if ((dy == 0 && dx == 0) || ny < 0 || nx < 0 || ny >= h || nx >= w) continue;
                    if (!known[static_cast<size_t>(ny) * w + nx]) continue;
                    for (int c = 0; c < ch; ++c) acc[c] += out.at(ny, nx, c);
                    ++n;
                }
            if (n == 0) {
                rest.emplace_back(y, x);
                continue;
            }
            Fill f{y, x, std::vector<float>(ch)};
            for (int c = 0; c < ch; ++c) f.v[c] = static_cast<float>(acc[c] / n);
            ring.push_back(std::move(f));
        }
        // Commit the whole ring at once so the result does not depend on scan order.
        for (auto const& f : ring) {
            for (int c = 0; c < ch; ++c) out.at(f.y, f.x, c) = f.v[c];
            known[static_cast<size_t>(f.y) * w + f.x] = 1;
        }
        pending = std::move(rest);
    }

    for (int it = 0; it < iterations; ++it) {
        ImageBuffer next = out;
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                if (!hole.get(y, x)) continue;
                std::fill(acc.begin(), acc.end(), 0.0);
                int n = 0;
                for (int dy = -1; dy <= 1; ++dy)
                    for (int dx = -1; dx <= 1; ++dx) {
                        int ny = y + dy, nx = x + dx;
                        if ((dy == 0 && dx == 0) || ny < 0 || nx < 0 || ny >= h || nx >= w) continue;
                        for (int c = 0; c < ch; ++c) acc[c] += out.at(ny, nx, c);
                        ++n;
                    }
                for (int c = 0; c < ch; ++c) next.at(y, x, c) = static_cast<float>(acc[c] / n);
            }
        out = std::move(next);
    }
    return out;
}

class DiffusionInpaint final : public InpaintBackend {
  public:
    explicit DiffusionInpaint(int iterations = 4) : iterations_(iterations) {}
    ImageBuffer inpaint(ImageBuffer const& image, MaskMap const& hole) const override {
        return inpaint_reference(image, hole, iterations_);
    }
    std::string name() const override { return "diffusion"; }

  private:
    int iterations_;
};

struct BackgroundAsset {
    ImageBuffer original;
    SegMap seg;
    ImageBuffer pure;
    ImageBuffer inpainted;
};

inline MaskMap object_mask(SegMap const& seg) {
    MaskMap m(seg.height(), seg.width());
    for (int y = 0; y < seg.height(); ++y)
        for (int x = 0; x < seg.width(); ++x) m.set(y, x, seg.get(y, x) != 0);
    return m;
}

inline BackgroundAsset prepare_background(ImageBuffer const& image, SegmentationBackend const& seg_backend,
                                          InpaintBackend const& inpaint) {
    BackgroundAsset out;
    out.original = image;
    out.seg = with_stage("background-segmentation", [&] { return seg_backend.segment(image); });
    if (!out.seg.same_shape(image)) throw Error(ErrorKind::backend, "segmentation has wrong dimensions", "background-segmentation");
    auto objects = object_mask(out.seg);
    out.pure = split_by_mask(image, objects).irrelevant;
    out.inpainted = objects.none() ? image : with_stage("background-inpaint", [&] { return inpaint.inpaint(image, objects); });
    return out;
}

/// `edited` is the manipulated object already mapped back into source coordinates;
/// `target_out` is the target region after the action (the output segmentation's class mask).
inline ImageBuffer combine_final(ImageBuffer const& edited, RegionSplit const& split, MaskMap const& target_out,
                                 Action const& action, BackgroundAsset const* background, InpaintBackend const& inpaint) {
    if (!edited.same_shape(split.irrelevant)) throw Error(ErrorKind::shape, "edited image does not match the source", "combination");
    if (!target_out.same_shape(split.mask)) throw Error(ErrorKind::shape, "output mask does not match the source", "combination");
    ImageBuffer base;
    switch (action.kind) {
    case ActionKind::attribute:
        base = split.irrelevant;
        break;
    case ActionKind::resize:
    case ActionKind::remove:
        base = with_stage("inpaint", [&] { return inpaint.inpaint(split.irrelevant, split.mask); });
        break;
    case ActionKind::background_swap:
        if (!background) throw Error(ErrorKind::parameter, "background swap needs a reference background", "combination");
        base = background->inpainted;
        if (!base.same_shape(edited)) base = resize_image(base, edited.height(), edited.width(), ResizeMethod::bilinear);
        break;
    }
    if (action.kind == ActionKind::remove) return base;
    return composite(edited, base, target_out);
}

inline ImageBuffer absorb_color_seam(ImageBuffer const& combined, MaskMap const& target_out, int band_width,
                                     InpaintBackend const& inpaint) {
    if (band_width < 1) throw Error(ErrorKind::parameter, "band width must be at least 1");
    if (target_out.none()) return combined;
    auto band = extract_outline(target_out, band_width);
    return with_stage("seam", [&] { return inpaint.inpaint(combined, band); });
}

} // namespace segedit
