#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace segedit {

enum class ErrorKind {
    shape,
    parameter,
    empty_region,
    no_target,
    ambiguity,
    palette,
    numeric,
    backend,
    not_found,
    precondition,
    io,
};

inline std::string_view to_string(ErrorKind kind) {
    switch (kind) {
    case ErrorKind::shape: return "shape";
    case ErrorKind::parameter: return "parameter";
    case ErrorKind::empty_region: return "empty-region";
    case ErrorKind::no_target: return "no-target";
    case ErrorKind::ambiguity: return "ambiguity";
    case ErrorKind::palette: return "palette";
    case ErrorKind::numeric: return "numeric";
    case ErrorKind::backend: return "backend";
    case ErrorKind::not_found: return "not-found";
    case ErrorKind::precondition: return "precondition";
    case ErrorKind::io: return "io";
    }
    return "unknown";
}

// Every failure in the library is reported through this type. `stage` names the
// pipeline phase that raised it ("segmentation", "selection", "combination", ...)
// and is empty for errors raised outside a pipeline run.
class Error : public std::runtime_error {
  public:
    Error(ErrorKind kind, std::string message, std::string stage = {})
        : std::runtime_error(format(kind, message, stage)), kind_(kind), stage_(std::move(stage)),
          detail_(std::move(message)) {}

    ErrorKind kind() const noexcept { return kind_; }
    std::string const& stage() const noexcept { return stage_; }
    std::string const& detail() const noexcept { return detail_; }

    Error with_stage(std::string stage) const {
        if (!stage_.empty()) return *this;
        return Error(kind_, detail_, std::move(stage));
    }

  private:
    static std::string format(ErrorKind kind, std::string const& message, std::string const& stage) {
        std::string out;
        if (!stage.empty()) out += "[" + stage + "] ";
        out += std::string(to_string(kind)) + " error: " + message;
        return out;
    }

    ErrorKind kind_;
    std::string stage_;
    std::string detail_;
};

// Runs `fn`, tagging any segedit::Error that escapes with `stage`.
template <typename Fn>
decltype(auto) with_stage(std::string_view stage, Fn&& fn) {
    try {
        return fn();
    } catch (Error const& e) {
        throw e.with_stage(std::string(stage));
    }
}

} // namespace segedit
