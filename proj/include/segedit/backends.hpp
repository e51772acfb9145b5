#pragma once

// Plug-in contracts for segmentation, detection, super-resolution and inpainting, the
// in-repo reference implementations, and the subprocess bridge for external models.

#include "segedit/error.hpp"
#include "segedit/image.hpp"
#include "segedit/png_io.hpp"
#include "segedit/synth.hpp"

#include <nlohmann/json.hpp>

#include <sys/types.h>
#include <sys/wait.h>
#include <unistd.h>

#include <array>
#include <cerrno>
#include <csignal>
#include <cstring>
#include <memory>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

namespace segedit {

struct DetectedObject {
    std::string label;
    double confidence = 1.0;
    BoundingBox box;
    int class_id = 0;
};

class SegmentationBackend {
  public:
    virtual ~SegmentationBackend() = default;
    virtual SegMap segment(ImageBuffer const& image) const = 0;
    virtual std::string name() const = 0;
};

class DetectionBackend {
  public:
    virtual ~DetectionBackend() = default;
    virtual std::vector<DetectedObject> detect(ImageBuffer const& image) const = 0;
    virtual std::string name() const = 0;
};

class SRBackend {
  public:
    virtual ~SRBackend() = default;
    /// Output dimensions are exactly the input dimensions times `scale`.
    virtual ImageBuffer upscale(ImageBuffer const& image, int scale) const = 0;
    virtual std::string name() const = 0;
};

class InpaintBackend {
  public:
    virtual ~InpaintBackend() = default;
    /// Fills `hole`; pixels outside the hole must come back bit-identical.
    virtual ImageBuffer inpaint(ImageBuffer const& image, MaskMap const& hole) const = 0;
    virtual std::string name() const = 0;
};

// ---------------------------------------------------------------------------------------
// Reference backends
// ---------------------------------------------------------------------------------------

namespace detail {

inline int palette_color_at(ImageBuffer const& img, int y, int x) {
    std::array<int, 3> v{};
    for (int c = 0; c < 3; ++c) v[c] = static_cast<int>(std::lround(img.at(y, x, c) * 255.0f));
    for (size_t i = 0; i < synth::palette_colors.size(); ++i) {
        auto const& rgb = synth::palette_colors[i].rgb;
        if (v[0] == rgb[0] && v[1] == rgb[1] && v[2] == rgb[2]) return static_cast<int>(i);
    }
    return -1;
}

struct Component {
    BoundingBox box;
    std::vector<std::pair<int, int>> pixels;
    synth::Shape shape = synth::Shape::circle;
    double fill = 0.0;
};

/// 8-connected components of same-palette-color pixels, classified by bbox fill ratio.
inline std::vector<Component> palette_components(ImageBuffer const& img) {
    if (img.channels() != 3) throw Error(ErrorKind::shape, "reference backends expect RGB images");
    int const h = img.height(), w = img.width();
    std::vector<int> color(static_cast<size_t>(h) * w);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) color[static_cast<size_t>(y) * w + x] = palette_color_at(img, y, x);
    std::vector<uint8_t> seen(color.size(), 0);
    std::vector<Component> out;
    std::vector<std::pair<int, int>> stack;
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            size_t i = static_cast<size_t>(y) * w + x;
            if (color[i] < 0 || seen[i]) continue;
            Component comp;
            comp.box = {y, x, y + 1, x + 1};
            stack.assign(1, {y, x});
            seen[i] = 1;
            while (!stack.empty()) {
                auto [cy, cx] = stack.back();
                stack.pop_back();
                comp.pixels.emplace_back(cy, cx);
                comp.box.y0 = std::min(comp.box.y0, cy);
                comp.box.x0 = std::min(comp.box.x0, cx);
                comp.box.y1 = std::max(comp.box.y1, cy + 1);
                comp.box.x1 = std::max(comp.box.x1, cx + 1);
                for (int dy = -1; dy <= 1; ++dy)
                    for (int dx = -1; dx <= 1; ++dx) {
                        int ny = cy + dy, nx = cx + dx;
                        if (ny < 0 || nx < 0 || ny >= h || nx >= w) continue;
                        size_t j = static_cast<size_t>(ny) * w + nx;
                        if (!seen[j] && color[j] == color[i]) {
                            seen[j] = 1;
                            stack.emplace_back(ny, nx);
                        }
                    }
            }
            comp.fill = static_cast<double>(comp.pixels.size()) / (comp.box.height() * comp.box.width());
            comp.shape = comp.fill > 0.92 ? synth::Shape::square
                         : comp.fill > 0.64 ? synth::Shape::circle
                                            : synth::Shape::triangle;
            // Specks (e.g. a stray palette-colored texel) are ignored.
            if (comp.pixels.size() >= 9) out.push_back(std::move(comp));
        }
    return out;
}

} // namespace detail

/// Analytic segmenter for synthetic scenes: palette-colored connected components, labeled
/// circle/square/triangle by how much of their bounding box they fill. Reentrant.
class ToySegmentation final : public SegmentationBackend {
  public:
    SegMap segment(ImageBuffer const& image) const override {
        SegMap seg(image.height(), image.width(), synth::shape_palette());
        for (auto const& comp : detail::palette_components(image))
            for (auto [y, x] : comp.pixels) seg.set(y, x, synth::class_id(comp.shape));
        return seg;
    }
    std::string name() const override { return "toy"; }
};

class ToyDetection final : public DetectionBackend {
  public:
    std::vector<DetectedObject> detect(ImageBuffer const& image) const override {
        std::vector<DetectedObject> out;
        for (auto const& comp : detail::palette_components(image)) {
            double ideal = comp.shape == synth::Shape::square ? 1.0 : comp.shape == synth::Shape::circle ? 0.785 : 0.5;
            double conf = std::clamp(1.0 - std::abs(comp.fill - ideal), 0.0, 1.0);
            out.push_back({std::string(synth::shape_name(comp.shape)), conf, comp.box, synth::class_id(comp.shape)});
        }
        return out;
    }
    std::string name() const override { return "toy"; }
};

/// Bilinear upscaling anchored at source pixels: output pixel k samples source position k/scale,
/// so every `scale`-th output pixel reproduces a source pixel exactly.
inline ImageBuffer anchored_resize(ImageBuffer const& image, double scale, int out_h, int out_w) {
    ImageBuffer out(out_h, out_w, image.channels());
    for (int y = 0; y < out_h; ++y) {
        double fy = std::min(y / scale, image.height() - 1.0);
        int y0 = static_cast<int>(std::floor(fy));
        int y1 = std::min(y0 + 1, image.height() - 1);
        double wy = fy - y0;
        for (int x = 0; x < out_w; ++x) {
            double fx = std::min(x / scale, image.width() - 1.0);
            int x0 = static_cast<int>(std::floor(fx));
            int x1 = std::min(x0 + 1, image.width() - 1);
            double wx = fx - x0;
            for (int c = 0; c < image.channels(); ++c) {
                double top = image.at(y0, x0, c) * (1 - wx) + image.at(y0, x1, c) * wx;
                double bot = image.at(y1, x0, c) * (1 - wx) + image.at(y1, x1, c) * wx;
                out.at(y, x, c) = static_cast<float>(std::clamp(top * (1 - wy) + bot * wy, 0.0, 1.0));
            }
        }
    }
    return out;
}

class BilinearSR final : public SRBackend {
  public:
    ImageBuffer upscale(ImageBuffer const& image, int scale) const override {
        if (scale < 1) throw Error(ErrorKind::parameter, "SR scale must be >= 1");
        if (scale == 1) return image;
        return anchored_resize(image, scale, image.height() * scale, image.width() * scale);
    }
    std::string name() const override { return "bilinear"; }
};

/// Enforces the inpainting contract on any backend: pixels outside the hole never change.
class CheckedInpaint final : public InpaintBackend {
  public:
    explicit CheckedInpaint(std::shared_ptr<InpaintBackend const> inner) : inner_(std::move(inner)) {}

    ImageBuffer inpaint(ImageBuffer const& image, MaskMap const& hole) const override {
        auto out = inner_->inpaint(image, hole);
        if (!out.same_shape(image)) throw Error(ErrorKind::backend, "inpaint backend changed image dimensions");
        for (int y = 0; y < image.height(); ++y)
            for (int x = 0; x < image.width(); ++x)
                if (!hole.get(y, x))
                    for (int c = 0; c < image.channels(); ++c)
                        if (out.at(y, x, c) != image.at(y, x, c))
                            throw Error(ErrorKind::backend, "inpaint backend '" + inner_->name() + "' modified pixels outside the hole");
        return out;
    }
    std::string name() const override { return inner_->name(); }

  private:
    std::shared_ptr<InpaintBackend const> inner_;
};

// ---------------------------------------------------------------------------------------
// Subprocess bridge
//
// Request:  one JSON header line, then the payloads back to back.
//   {"op": "segment"|"detect"|"upscale"|"inpaint", "payload_sizes": [n...], "scale": s}
//   segment/detect/upscale send one RGB PNG; inpaint sends an RGB PNG and a gray hole PNG.
// Response: one JSON header line, then the payloads.
//   {"ok": true, "payload_sizes": [m...], "palette": {...}, "objects": [...]}
//   {"ok": false, "error": "..."}
// ---------------------------------------------------------------------------------------

struct BackendMessage {
    nlohmann::json header;
    std::vector<std::vector<uint8_t>> payloads;
};

inline std::vector<uint8_t> frame_message(BackendMessage const& msg) {
    auto header = msg.header;
    header["payload_sizes"] = nlohmann::json::array();
    for (auto const& p : msg.payloads) header["payload_sizes"].push_back(p.size());
    std::string line = header.dump() + "\n";
    std::vector<uint8_t> out(line.begin(), line.end());
    for (auto const& p : msg.payloads) out.insert(out.end(), p.begin(), p.end());
    return out;
}

inline BackendMessage parse_message(std::span<uint8_t const> bytes) {
    auto nl = std::find(bytes.begin(), bytes.end(), uint8_t{'\n'});
    if (nl == bytes.end()) throw Error(ErrorKind::backend, "backend message has no header line");
    BackendMessage msg;
    try {
        msg.header = nlohmann::json::parse(bytes.begin(), nl);
    } catch (nlohmann::json::exception const& e) {
        throw Error(ErrorKind::backend, std::string("malformed backend header: ") + e.what());
    }
    size_t offset = static_cast<size_t>(nl - bytes.begin()) + 1;
    for (auto const& n : msg.header.value("payload_sizes", nlohmann::json::array())) {
        auto size = n.get<size_t>();
        if (offset + size > bytes.size()) throw Error(ErrorKind::backend, "backend payload truncated");
        msg.payloads.emplace_back(bytes.begin() + offset, bytes.begin() + offset + size);
        offset += size;
    }
    return msg;
}

/// Runs `command` through /bin/sh, feeds `input` on stdin and returns all of stdout.
inline std::vector<uint8_t> run_subprocess(std::string const& command, std::vector<uint8_t> const& input) {
    int in_pipe[2], out_pipe[2];
    if (pipe(in_pipe) != 0) throw Error(ErrorKind::backend, "pipe failed");
    if (pipe(out_pipe) != 0) {
        close(in_pipe[0]);
        close(in_pipe[1]);
        throw Error(ErrorKind::backend, "pipe failed");
    }
    pid_t pid = fork();
    if (pid < 0) throw Error(ErrorKind::backend, "fork failed");
    if (pid == 0) {
        dup2(in_pipe[0], STDIN_FILENO);
        dup2(out_pipe[1], STDOUT_FILENO);
        close(in_pipe[0]);
        close(in_pipe[1]);
        close(out_pipe[0]);
        close(out_pipe[1]);
        execl("/bin/sh", "sh", "-c", command.c_str(), static_cast<char*>(nullptr));
        _exit(127);
    }
    close(in_pipe[0]);
    close(out_pipe[1]);
    std::thread writer([fd = in_pipe[1], &input] {
        // A child that exits early closes its stdin; ignore the resulting EPIPE.
        std::signal(SIGPIPE, SIG_IGN);
        size_t off = 0;
        while (off < input.size()) {
            ssize_t n = write(fd, input.data() + off, input.size() - off);
            if (n < 0) {
                if (errno == EINTR) continue;
                break;
            }
            off += static_cast<size_t>(n);
        }
        close(fd);
    });
    std::vector<uint8_t> output;
    std::array<uint8_t, 65536> buf;
    for (;;) {
        ssize_t n = read(out_pipe[0], buf.data(), buf.size());
        if (n < 0 && errno == EINTR) continue;
        if (n <= 0) break;
        output.insert(output.end(), buf.begin(), buf.begin() + n);
    }
    close(out_pipe[0]);
    writer.join();
    int status = 0;
    waitpid(pid, &status, 0);
    if (!WIFEXITED(status) || WEXITSTATUS(status) != 0)
        throw Error(ErrorKind::backend, "backend command '" + command + "' exited with status " +
                                            std::to_string(WIFEXITED(status) ? WEXITSTATUS(status) : -1));
    return output;
}

/// One subprocess per call; calls on one instance are serialized.
class ExternalBackend {
  public:
    explicit ExternalBackend(std::string command) : command_(std::move(command)) {}

    BackendMessage call(BackendMessage const& request) const {
        std::lock_guard lock(mutex_);
        auto reply = parse_message(run_subprocess(command_, frame_message(request)));
        if (!reply.header.value("ok", false))
            throw Error(ErrorKind::backend, "external backend failed: " + reply.header.value("error", std::string("unknown error")));
        return reply;
    }

    std::string const& command() const noexcept { return command_; }

  private:
    std::string command_;
    mutable std::mutex mutex_;
};

class ExternalSegmentation final : public SegmentationBackend {
  public:
    explicit ExternalSegmentation(std::string command) : backend_(std::move(command)) {}
    SegMap segment(ImageBuffer const& image) const override {
        auto reply = backend_.call({{{"op", "segment"}}, {encode_png(image)}});
        if (reply.payloads.size() != 1) throw Error(ErrorKind::backend, "segment reply needs one payload");
        auto seg = decode_segmap_png(reply.payloads[0], palette_from_json(reply.header.value("palette", nlohmann::json::object())));
        if (!seg.same_shape(image)) throw Error(ErrorKind::backend, "segmentation backend returned wrong dimensions");
        seg.validate();
        return seg;
    }
    std::string name() const override { return "external:" + backend_.command(); }

  private:
    ExternalBackend backend_;
};

class ExternalDetection final : public DetectionBackend {
  public:
    explicit ExternalDetection(std::string command) : backend_(std::move(command)) {}
    std::vector<DetectedObject> detect(ImageBuffer const& image) const override {
        auto reply = backend_.call({{{"op", "detect"}}, {encode_png(image)}});
        std::vector<DetectedObject> out;
        for (auto const& o : reply.header.value("objects", nlohmann::json::array())) {
            auto b = o.at("box");
            DetectedObject d{o.at("label").get<std::string>(), o.value("confidence", 1.0),
                             {b.at(0).get<int>(), b.at(1).get<int>(), b.at(2).get<int>(), b.at(3).get<int>()},
                             o.at("class_id").get<int>()};
            if (!d.box.valid_for(image.height(), image.width())) throw Error(ErrorKind::backend, "detection box outside image");
            out.push_back(std::move(d));
        }
        return out;
    }
    std::string name() const override { return "external:" + backend_.command(); }

  private:
    ExternalBackend backend_;
};

class ExternalSR final : public SRBackend {
  public:
    explicit ExternalSR(std::string command) : backend_(std::move(command)) {}
    ImageBuffer upscale(ImageBuffer const& image, int scale) const override {
        auto reply = backend_.call({{{"op", "upscale"}, {"scale", scale}}, {encode_png(image)}});
        if (reply.payloads.size() != 1) throw Error(ErrorKind::backend, "upscale reply needs one payload");
        auto out = decode_png(reply.payloads[0]);
        if (out.height() != image.height() * scale || out.width() != image.width() * scale)
            throw Error(ErrorKind::backend, "SR backend returned wrong dimensions");
        return out;
    }
    std::string name() const override { return "external:" + backend_.command(); }

  private:
    ExternalBackend backend_;
};

class ExternalInpaint final : public InpaintBackend {
  public:
    explicit ExternalInpaint(std::string command) : backend_(std::move(command)) {}
    ImageBuffer inpaint(ImageBuffer const& image, MaskMap const& hole) const override {
        auto reply = backend_.call({{{"op", "inpaint"}}, {encode_png(image), encode_mask_png(hole)}});
        if (reply.payloads.size() != 1) throw Error(ErrorKind::backend, "inpaint reply needs one payload");
        auto out = decode_png(reply.payloads[0]);
        // PNG transport quantizes; restore the untouched pixels exactly.
        if (out.same_shape(image))
            for (int y = 0; y < image.height(); ++y)
                for (int x = 0; x < image.width(); ++x)
                    if (!hole.get(y, x))
                        for (int c = 0; c < 3; ++c) out.at(y, x, c) = image.at(y, x, c);
        return out;
    }
    std::string name() const override { return "external:" + backend_.command(); }

  private:
    ExternalBackend backend_;
};

/// Answers one framed request with the given backends; the reference implementation of
/// the external protocol. tests/toy_backend.cpp wraps it as a standalone process.
inline std::vector<uint8_t> serve_backend_request(std::span<uint8_t const> request, SegmentationBackend const& seg,
                                                  DetectionBackend const& det, SRBackend const& sr,
                                                  InpaintBackend const& inpaint) {
    BackendMessage reply;
    try {
        auto msg = parse_message(request);
        auto op = msg.header.value("op", std::string());
        if (msg.payloads.empty()) throw Error(ErrorKind::backend, "request has no image payload");
        auto image = decode_png(msg.payloads[0]);
        reply.header["ok"] = true;
        if (op == "segment") {
            auto s = seg.segment(image);
            reply.header["palette"] = palette_to_json(s.palette());
            reply.payloads.push_back(encode_segmap_png(s));
        } else if (op == "detect") {
            auto arr = nlohmann::json::array();
            for (auto const& d : det.detect(image))
                arr.push_back({{"label", d.label}, {"confidence", d.confidence},
                               {"box", {d.box.y0, d.box.x0, d.box.y1, d.box.x1}}, {"class_id", d.class_id}});
            reply.header["objects"] = arr;
        } else if (op == "upscale") {
            reply.payloads.push_back(encode_png(sr.upscale(image, msg.header.value("scale", 1))));
        } else if (op == "inpaint") {
            if (msg.payloads.size() < 2) throw Error(ErrorKind::backend, "inpaint request needs a hole mask");
            reply.payloads.push_back(encode_png(inpaint.inpaint(image, decode_mask_png(msg.payloads[1]))));
        } else {
            throw Error(ErrorKind::backend, "unknown op '" + op + "'");
        }
    } catch (std::exception const& e) {
        reply = {};
        reply.header = {{"ok", false}, {"error", e.what()}};
    }
    return frame_message(reply);
}

} // namespace segedit
