#pragma once

// HTTP front end for SessionStore. Images travel as PNG: base64 inside JSON bodies, raw
// bytes for the segmap PUT and for every GET that returns a picture.

#include "segedit/session.hpp"

#include <httplib.h>
#include <nlohmann/json.hpp>

#include <string>

namespace segedit {

inline int http_status(ErrorKind kind) {
    switch (kind) {
    case ErrorKind::not_found: return 404;
    case ErrorKind::precondition: return 409;
    case ErrorKind::backend: return 502;
    case ErrorKind::numeric:
    case ErrorKind::io: return 500;
    default: return 400;
    }
}

namespace detail {

inline void send_json(httplib::Response& res, nlohmann::json const& body, int status = 200) {
    res.status = status;
    res.set_content(body.dump(), "application/json");
}

inline void send_png(httplib::Response& res, std::vector<uint8_t> const& png) {
    res.status = 200;
    res.set_content(reinterpret_cast<char const*>(png.data()), png.size(), "image/png");
}

inline nlohmann::json parse_body(httplib::Request const& req) {
    try {
        auto j = nlohmann::json::parse(req.body);
        if (!j.is_object()) throw Error(ErrorKind::parameter, "request body must be a JSON object");
        return j;
    } catch (nlohmann::json::parse_error const& e) {
        throw Error(ErrorKind::parameter, std::string("request body is not valid JSON: ") + e.what());
    }
}

inline std::string require_string(nlohmann::json const& j, char const* key) {
    if (!j.contains(key) || !j.at(key).is_string()) throw Error(ErrorKind::parameter, std::string("missing string field '") + key + "'");
    return j.at(key).get<std::string>();
}

inline ImageBuffer image_field(nlohmann::json const& j, char const* key) {
    auto bytes = base64_decode(require_string(j, key));
    return decode_png(bytes);
}

/// Wraps a handler so library errors become JSON error replies.
template <class Fn>
httplib::Server::Handler guarded(Fn fn) {
    return [fn = std::move(fn)](httplib::Request const& req, httplib::Response& res) {
        try {
            fn(req, res);
        } catch (Error const& e) {
            send_json(res, {{"error", e.detail()}, {"kind", std::string(to_string(e.kind()))}, {"stage", e.stage()}}, http_status(e.kind()));
        } catch (std::exception const& e) {
            send_json(res, {{"error", e.what()}, {"kind", "internal"}, {"stage", ""}}, 500);
        }
    };
}

} // namespace detail

/// POST /sessions {image, instruction}            -> 201 {id, seg, target, state, view}
/// GET  /sessions/{id}                            -> state view
/// GET  /sessions/{id}/segmap                     -> PNG of class ids
/// PUT  /sessions/{id}/segmap (PNG body)          -> 204
/// POST /sessions/{id}/apply {instruction, background?} -> {step_index, output_url, seg_out_url, report}
/// POST /sessions/{id}/undo, /redo                -> state view
/// GET  /sessions/{id}/input                      -> PNG
/// GET  /sessions/{id}/steps/{k}/output, /segmap  -> PNG
inline void register_routes(httplib::Server& server, SessionStore& store) {
    using detail::guarded;
    using detail::send_json;
    using detail::send_png;
    using Req = httplib::Request;
    using Res = httplib::Response;

    server.Post("/sessions", guarded([&store](Req const& req, Res& res) {
                    auto body = detail::parse_body(req);
                    auto image = detail::image_field(body, "image");
                    auto s = store.create(image, detail::require_string(body, "instruction"));
                    send_json(res,
                              {{"id", s.id},
                               {"seg", detail::base64_encode(encode_segmap_png(s.seg_current))},
                               {"target", s.target_label},
                               {"state", s.needs_segmentation ? "needs-segmentation" : "ready"},
                               {"view", state_view(s)}},
                              201);
                }));

    server.Get(R"(/sessions/([0-9A-Za-z]+))", guarded([&store](Req const& req, Res& res) { send_json(res, state_view(store.get(req.matches[1]))); }));

    server.Get(R"(/sessions/([0-9A-Za-z]+)/segmap)", guarded([&store](Req const& req, Res& res) {
                   send_png(res, encode_segmap_png(store.get(req.matches[1]).seg_current));
               }));

    server.Put(R"(/sessions/([0-9A-Za-z]+)/segmap)", guarded([&store](Req const& req, Res& res) {
                   std::string id = req.matches[1];
                   auto current = store.get(id);
                   std::span<uint8_t const> bytes(reinterpret_cast<uint8_t const*>(req.body.data()), req.body.size());
                   store.update_segmap(id, decode_segmap_png(bytes, current.seg_current.palette()));
                   res.status = 204;
               }));

    server.Post(R"(/sessions/([0-9A-Za-z]+)/apply)", guarded([&store](Req const& req, Res& res) {
                    std::string id = req.matches[1];
                    auto body = detail::parse_body(req);
                    std::optional<ImageBuffer> background;
                    if (body.contains("background") && !body.at("background").is_null()) background = detail::image_field(body, "background");
                    auto [s, k] = store.apply(id, detail::require_string(body, "instruction"), background ? &*background : nullptr);
                    auto base = "/sessions/" + id + "/steps/" + std::to_string(k);
                    send_json(res, {{"step_index", k},
                                    {"output_url", base + "/output"},
                                    {"seg_out_url", base + "/segmap"},
                                    {"report", s.steps[static_cast<size_t>(k)]->report},
                                    {"view", state_view(s, false)}});
                }));

    server.Post(R"(/sessions/([0-9A-Za-z]+)/undo)", guarded([&store](Req const& req, Res& res) { send_json(res, state_view(store.undo(req.matches[1]))); }));
    server.Post(R"(/sessions/([0-9A-Za-z]+)/redo)", guarded([&store](Req const& req, Res& res) { send_json(res, state_view(store.redo(req.matches[1]))); }));

    server.Get(R"(/sessions/([0-9A-Za-z]+)/input)", guarded([&store](Req const& req, Res& res) { send_png(res, encode_png(store.get(req.matches[1]).input)); }));

    server.Get(R"(/sessions/([0-9A-Za-z]+)/steps/(\d+)/(output|segmap))", guarded([&store](Req const& req, Res& res) {
                   auto s = store.get(req.matches[1]);
                   size_t k = std::stoul(req.matches[2]);
                   if (k >= s.steps.size()) throw Error(ErrorKind::not_found, "no step " + std::to_string(k));
                   auto const& st = *s.steps[k];
                   send_png(res, req.matches[3] == "output" ? encode_png(st.output) : encode_segmap_png(st.seg_out));
               }));
}

/// Splits "host:port"; a bare port binds to 127.0.0.1.
inline std::pair<std::string, int> parse_listen(std::string const& listen) {
    auto colon = listen.rfind(':');
    std::string host = colon == std::string::npos ? "127.0.0.1" : listen.substr(0, colon);
    std::string port = colon == std::string::npos ? listen : listen.substr(colon + 1);
    try {
        size_t used = 0;
        int p = std::stoi(port, &used);
        if (used != port.size() || p < 0 || p > 65535) throw std::out_of_range("port");
        return {host.empty() ? "127.0.0.1" : host, p};
    } catch (std::exception const&) {
        throw Error(ErrorKind::parameter, "bad listen address '" + listen + "'");
    }
}

} // namespace segedit
