#pragma once

// Interactive editing sessions: cursor-based undo/redo over immutable steps, a directory
// per session on disk, and per-session serialization of commands.

#include "segedit/pipeline.hpp"
#include "segedit/png_io.hpp"

#include <nlohmann/json.hpp>

#include <chrono>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <random>
#include <sstream>
#include <string>
#include <vector>

namespace segedit {

struct EditStep {
    uint64_t uid = 0; // storage key; never reused within a session
    std::string instruction;
    std::string action;
    double factor = 1.0;
    std::string target;
    SegMap seg_used;
    SegMap seg_out;
    ImageBuffer output;
    std::string background_ref;
    nlohmann::json report = nlohmann::json::object();

    friend bool operator==(EditStep const& a, EditStep const& b) {
        return a.uid == b.uid && a.instruction == b.instruction && a.action == b.action && a.factor == b.factor && a.target == b.target &&
               a.seg_used == b.seg_used && a.seg_out == b.seg_out && a.output == b.output && a.background_ref == b.background_ref &&
               a.report == b.report;
    }
};

using StepPtr = std::shared_ptr<EditStep const>;

struct EditSession {
    std::string id;
    ImageBuffer input;
    SegMap seg_current;
    std::string target_label;
    std::vector<StepPtr> steps;
    int cursor = 0;
    bool needs_segmentation = false;
    std::string message; // last surfaced error or warning
    uint64_t next_uid = 0;
    int64_t created_at = 0; // ms since epoch
    int64_t updated_at = 0;

    friend bool operator==(EditSession const& a, EditSession const& b) {
        if (a.steps.size() != b.steps.size()) return false;
        for (size_t i = 0; i < a.steps.size(); ++i)
            if (!(*a.steps[i] == *b.steps[i])) return false;
        return a.id == b.id && a.input == b.input && a.seg_current == b.seg_current && a.target_label == b.target_label &&
               a.cursor == b.cursor && a.needs_segmentation == b.needs_segmentation && a.message == b.message && a.next_uid == b.next_uid &&
               a.created_at == b.created_at && a.updated_at == b.updated_at;
    }
};

inline int64_t now_ms() {
    return std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::system_clock::now().time_since_epoch()).count();
}

// ---------------------------------------------------------------- state machine

/// The image the user currently sees.
inline ImageBuffer const& visible_output(EditSession const& s) { return s.cursor == 0 ? s.input : s.steps[static_cast<size_t>(s.cursor) - 1]->output; }

/// Drops the redo branch, appends, advances the cursor, and continues from the step's segmentation.
inline void push_step(EditSession& s, EditStep step) {
    s.steps.resize(static_cast<size_t>(s.cursor));
    step.uid = s.next_uid++;
    s.seg_current = step.seg_out;
    s.steps.push_back(std::make_shared<EditStep const>(std::move(step)));
    ++s.cursor;
    s.message.clear();
}

inline void sync_seg_to_cursor(EditSession& s) {
    if (s.steps.empty()) return;
    s.seg_current = s.cursor == 0 ? s.steps.front()->seg_used : s.steps[static_cast<size_t>(s.cursor) - 1]->seg_out;
}

/// Returns false (and leaves a warning) when there is nothing to undo.
inline bool undo(EditSession& s) {
    if (s.cursor == 0) {
        s.message = "nothing to undo";
        return false;
    }
    --s.cursor;
    sync_seg_to_cursor(s);
    s.message.clear();
    return true;
}

inline bool redo(EditSession& s) {
    if (s.cursor >= static_cast<int>(s.steps.size())) {
        s.message = "nothing to redo";
        return false;
    }
    ++s.cursor;
    sync_seg_to_cursor(s);
    s.message.clear();
    return true;
}

inline bool seg_is_empty(SegMap const& seg) {
    for (int id : seg.ids())
        if (id != 0) return false;
    return true;
}

inline void replace_segmap(EditSession& s, SegMap seg) {
    if (!seg.same_shape(s.input)) throw Error(ErrorKind::shape, "segmentation map does not match the session image");
    seg.validate();
    s.seg_current = std::move(seg);
    s.needs_segmentation = seg_is_empty(s.seg_current);
    s.updated_at = now_ms();
}

// ---------------------------------------------------------------- views and persistence

namespace detail {

inline std::string base64_encode(std::span<uint8_t const> bytes) {
    static constexpr char alphabet[] = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
    std::string out;
    out.reserve((bytes.size() + 2) / 3 * 4);
    for (size_t i = 0; i < bytes.size(); i += 3) {
        uint32_t v = static_cast<uint32_t>(bytes[i]) << 16;
        if (i + 1 < bytes.size()) v |= static_cast<uint32_t>(bytes[i + 1]) << 8;
        if (i + 2 < bytes.size()) v |= bytes[i + 2];
        out += alphabet[(v >> 18) & 63];
        out += alphabet[(v >> 12) & 63];
        out += i + 1 < bytes.size() ? alphabet[(v >> 6) & 63] : '=';
        out += i + 2 < bytes.size() ? alphabet[v & 63] : '=';
    }
    return out;
}

inline std::vector<uint8_t> base64_decode(std::string_view text) {
    auto value = [](char c) -> int {
        if (c >= 'A' && c <= 'Z') return c - 'A';
        if (c >= 'a' && c <= 'z') return c - 'a' + 26;
        if (c >= '0' && c <= '9') return c - '0' + 52;
        if (c == '+' || c == '-') return 62;
        if (c == '/' || c == '_') return 63;
        return -1;
    };
    if (auto comma = text.find(','); text.rfind("data:", 0) == 0 && comma != std::string_view::npos) text.remove_prefix(comma + 1);
    std::vector<uint8_t> out;
    uint32_t acc = 0;
    int bits = 0;
    for (char c : text) {
        if (c == '=' || std::isspace(static_cast<unsigned char>(c))) continue;
        int v = value(c);
        if (v < 0) throw Error(ErrorKind::parameter, "invalid base64 data");
        acc = (acc << 6) | static_cast<uint32_t>(v);
        bits += 6;
        if (bits >= 8) {
            bits -= 8;
            out.push_back(static_cast<uint8_t>((acc >> bits) & 0xFF));
        }
    }
    return out;
}

inline void write_atomic(std::filesystem::path const& path, std::string const& text) {
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw Error(ErrorKind::io, "cannot write " + tmp.string());
        out << text;
        if (!out.flush()) throw Error(ErrorKind::io, "short write to " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

inline bool valid_session_id(std::string const& id) {
    if (id.size() != 32) return false;
    for (char c : id)
        if (!std::isxdigit(static_cast<unsigned char>(c))) return false;
    return true;
}

} // namespace detail

inline nlohmann::json state_view(EditSession const& s, bool with_thumbnails = true) {
    nlohmann::json steps = nlohmann::json::array();
    for (size_t k = 0; k < s.steps.size(); ++k) {
        auto const& st = *s.steps[k];
        nlohmann::json j{{"index", k},
                         {"instruction", st.instruction},
                         {"action", st.action},
                         {"factor", st.factor},
                         {"target", st.target},
                         {"output_url", "/sessions/" + s.id + "/steps/" + std::to_string(k) + "/output"},
                         {"seg_out_url", "/sessions/" + s.id + "/steps/" + std::to_string(k) + "/segmap"}};
        if (with_thumbnails) {
            int h = std::max(1, st.output.height() * 64 / std::max(st.output.height(), st.output.width()));
            int w = std::max(1, st.output.width() * 64 / std::max(st.output.height(), st.output.width()));
            j["thumbnail"] = "data:image/png;base64," + detail::base64_encode(encode_png(resize_image(st.output, h, w, ResizeMethod::bilinear)));
        }
        steps.push_back(std::move(j));
    }
    return {{"id", s.id},
            {"state", s.needs_segmentation ? "needs-segmentation" : "ready"},
            {"target", s.target_label},
            {"width", s.input.width()},
            {"height", s.input.height()},
            {"cursor", s.cursor},
            {"step_count", s.steps.size()},
            {"steps", steps},
            {"message", s.message},
            {"palette", palette_to_json(s.seg_current.palette())},
            {"segmap_url", "/sessions/" + s.id + "/segmap"},
            {"created_at", s.created_at},
            {"updated_at", s.updated_at}};
}

/// Layout: manifest.json, input.png, seg_current.png, steps/<uid>/{output,seg_used,seg_out}.png.
/// Step directories are written before the manifest and never rewritten, so a crash
/// leaves the previous manifest valid.
inline void save_session(EditSession const& s, std::filesystem::path const& dir) {
    namespace fs = std::filesystem;
    fs::create_directories(dir / "steps");
    if (!fs::exists(dir / "input.png")) write_png(dir / "input.png", s.input);
    // Named by content hash, so rewriting never changes a file an older manifest points at.
    auto seg_png = encode_segmap_png(s.seg_current);
    uint64_t hash = 1469598103934665603ull;
    for (uint8_t b : seg_png) hash = (hash ^ b) * 1099511628211ull;
    std::ostringstream seg_name_ss;
    seg_name_ss << "seg_current_" << std::hex << hash << ".png";
    auto seg_name = seg_name_ss.str();
    if (!fs::exists(dir / seg_name)) detail::write_bytes(dir / seg_name, seg_png);
    nlohmann::json steps = nlohmann::json::array();
    for (auto const& st : s.steps) {
        auto sd = dir / "steps" / std::to_string(st->uid);
        if (!fs::exists(sd / "done")) {
            fs::create_directories(sd);
            write_png(sd / "output.png", st->output);
            detail::write_bytes(sd / "seg_used.png", encode_segmap_png(st->seg_used));
            detail::write_bytes(sd / "seg_out.png", encode_segmap_png(st->seg_out));
            std::ofstream(sd / "done") << "1";
        }
        steps.push_back({{"uid", st->uid},
                         {"instruction", st->instruction},
                         {"action", st->action},
                         {"factor", st->factor},
                         {"target", st->target},
                         {"background_ref", st->background_ref},
                         {"report", st->report},
                         {"palette_used", palette_to_json(st->seg_used.palette())},
                         {"palette_out", palette_to_json(st->seg_out.palette())}});
    }
    nlohmann::json manifest{{"version", 1},
                            {"id", s.id},
                            {"target_label", s.target_label},
                            {"cursor", s.cursor},
                            {"needs_segmentation", s.needs_segmentation},
                            {"message", s.message},
                            {"next_uid", s.next_uid},
                            {"created_at", s.created_at},
                            {"updated_at", s.updated_at},
                            {"seg_current", seg_name},
                            {"palette", palette_to_json(s.seg_current.palette())},
                            {"steps", steps}};
    detail::write_atomic(dir / "manifest.json", manifest.dump(2));
    // Older segmentation snapshots are unreferenced once the manifest is in place.
    for (auto const& e : fs::directory_iterator(dir)) {
        auto name = e.path().filename().string();
        if (name.rfind("seg_current_", 0) == 0 && name != seg_name) fs::remove(e.path());
    }
}

inline EditSession load_session(std::filesystem::path const& dir) {
    nlohmann::json m;
    {
        std::ifstream in(dir / "manifest.json");
        if (!in) throw Error(ErrorKind::not_found, "no session at " + dir.string());
        try {
            m = nlohmann::json::parse(in);
        } catch (nlohmann::json::exception const& e) {
            throw Error(ErrorKind::io, std::string("corrupt session manifest: ") + e.what());
        }
    }
    EditSession s;
    try {
        s.id = m.at("id").get<std::string>();
        s.target_label = m.at("target_label").get<std::string>();
        s.cursor = m.at("cursor").get<int>();
        s.needs_segmentation = m.at("needs_segmentation").get<bool>();
        s.message = m.at("message").get<std::string>();
        s.next_uid = m.at("next_uid").get<uint64_t>();
        s.created_at = m.at("created_at").get<int64_t>();
        s.updated_at = m.at("updated_at").get<int64_t>();
        s.input = read_png(dir / "input.png");
        s.seg_current = decode_segmap_png(detail::read_bytes(dir / m.at("seg_current").get<std::string>()), palette_from_json(m.at("palette")));
        for (auto const& j : m.at("steps")) {
            EditStep st;
            st.uid = j.at("uid").get<uint64_t>();
            st.instruction = j.at("instruction").get<std::string>();
            st.action = j.at("action").get<std::string>();
            st.factor = j.at("factor").get<double>();
            st.target = j.at("target").get<std::string>();
            st.background_ref = j.at("background_ref").get<std::string>();
            st.report = j.at("report");
            auto sd = dir / "steps" / std::to_string(st.uid);
            st.output = read_png(sd / "output.png");
            st.seg_used = decode_segmap_png(detail::read_bytes(sd / "seg_used.png"), palette_from_json(j.at("palette_used")));
            st.seg_out = decode_segmap_png(detail::read_bytes(sd / "seg_out.png"), palette_from_json(j.at("palette_out")));
            s.steps.push_back(std::make_shared<EditStep const>(std::move(st)));
        }
    } catch (nlohmann::json::exception const& e) {
        throw Error(ErrorKind::io, std::string("corrupt session manifest: ") + e.what());
    }
    if (s.cursor < 0 || s.cursor > static_cast<int>(s.steps.size())) throw Error(ErrorKind::io, "session cursor out of range");
    return s;
}

// ---------------------------------------------------------------- service

/// Sessions keyed by id. Commands on one session run one at a time; different sessions
/// proceed concurrently. Every mutation is persisted before the call returns.
class SessionStore {
  public:
    SessionStore(Engine const& engine, std::filesystem::path root) : engine_(engine), root_(std::move(root)) {
        std::filesystem::create_directories(root_);
    }

    EditSession create(ImageBuffer const& image, std::string const& instruction) {
        if (!image.is_valid()) throw Error(ErrorKind::parameter, "input image is empty or out of range", "input");
        EditSession s;
        s.id = new_id();
        s.input = quantize_8bit(image);
        s.created_at = s.updated_at = now_ms();
        try {
            auto [seg, target] = engine_.locate(s.input, instruction);
            s.seg_current = std::move(seg);
            s.target_label = std::move(target);
        } catch (Error const& e) {
            if (e.kind() != ErrorKind::no_target && e.kind() != ErrorKind::empty_region) throw;
            s.needs_segmentation = true;
            s.message = e.what();
            SegMap::Palette palette;
            try {
                palette = engine_.segment(s.input).palette();
            } catch (Error const&) {
            }
            s.seg_current = SegMap(s.input.height(), s.input.width(), palette);
        }
        auto entry = std::make_shared<Entry>();
        entry->session = s;
        save_session(s, dir_of(s.id));
        std::lock_guard lock(map_mutex_);
        sessions_[s.id] = entry;
        return s;
    }

    EditSession get(std::string const& id) {
        auto e = entry(id);
        std::lock_guard lock(e->mutex);
        return e->session;
    }

    EditSession update_segmap(std::string const& id, SegMap seg) {
        return mutate(id, [&](EditSession& s) { replace_segmap(s, std::move(seg)); });
    }

    /// Runs the pipeline on the visible image with the current segmentation.
    std::pair<EditSession, int> apply(std::string const& id, std::string const& instruction, ImageBuffer const* background = nullptr) {
        int index = -1;
        auto s = mutate(id, [&](EditSession& s) {
            if (seg_is_empty(s.seg_current))
                throw Error(ErrorKind::precondition, "the segmentation map is empty; paint the target first", "input");
            auto r = engine_.edit(visible_output(s), instruction, &s.seg_current, background, s.target_label);
            EditStep st;
            st.instruction = instruction;
            st.action = std::string(to_string(r.instruction.action.kind));
            st.factor = r.instruction.action.factor;
            st.target = r.target;
            st.seg_used = s.seg_current;
            st.seg_out = r.seg_out;
            st.output = quantize_8bit(r.output);
            st.background_ref = background ? "upload-" + std::to_string(s.next_uid) : "";
            st.report = edit_report(r);
            if (s.target_label.empty()) s.target_label = r.target;
            push_step(s, std::move(st));
            s.needs_segmentation = false;
            s.updated_at = now_ms();
            index = s.cursor - 1;
        });
        return {std::move(s), index};
    }

    EditSession undo(std::string const& id) {
        return mutate(id, [](EditSession& s) {
            segedit::undo(s);
            s.updated_at = now_ms();
        });
    }

    EditSession redo(std::string const& id) {
        return mutate(id, [](EditSession& s) {
            segedit::redo(s);
            s.updated_at = now_ms();
        });
    }

    std::filesystem::path const& root() const noexcept { return root_; }

  private:
    struct Entry {
        std::mutex mutex;
        EditSession session;
    };

    std::filesystem::path dir_of(std::string const& id) const { return root_ / id; }

    std::shared_ptr<Entry> entry(std::string const& id) {
        if (!detail::valid_session_id(id)) throw Error(ErrorKind::not_found, "unknown session '" + id + "'");
        std::lock_guard lock(map_mutex_);
        if (auto it = sessions_.find(id); it != sessions_.end()) return it->second;
        if (!std::filesystem::exists(dir_of(id) / "manifest.json")) throw Error(ErrorKind::not_found, "unknown session '" + id + "'");
        auto e = std::make_shared<Entry>();
        e->session = load_session(dir_of(id));
        sessions_[id] = e;
        return e;
    }

    /// Works on a copy so a failed command leaves the session untouched.
    template <class Fn>
    EditSession mutate(std::string const& id, Fn&& fn) {
        auto e = entry(id);
        std::lock_guard lock(e->mutex);
        EditSession next = e->session;
        fn(next);
        save_session(next, dir_of(id));
        e->session = next;
        return next;
    }

    std::string new_id() {
        std::lock_guard lock(map_mutex_);
        static char const hex[] = "0123456789abcdef";
        for (;;) {
            std::string id;
            for (int i = 0; i < 32; ++i) id += hex[rng_() & 15];
            if (!sessions_.contains(id) && !std::filesystem::exists(dir_of(id))) return id;
        }
    }

    Engine const& engine_;
    std::filesystem::path root_;
    std::mutex map_mutex_;
    std::map<std::string, std::shared_ptr<Entry>> sessions_;
    std::mt19937_64 rng_{std::random_device{}()};
};

} // namespace segedit
