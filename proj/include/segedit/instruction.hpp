#pragma once

// Instruction text -> action + target class.

#include "segedit/error.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

namespace segedit {

enum class ActionKind { attribute, resize, remove, background_swap };

struct Action {
    ActionKind kind = ActionKind::attribute;
    double factor = 1.0; // meaningful for resize only

    static Action attribute() { return {}; }
    static Action resize(double factor) {
        if (!(factor > 0.0) || !std::isfinite(factor)) throw Error(ErrorKind::parameter, "resize factor must be positive");
        return {ActionKind::resize, factor};
    }
    static Action remove() { return {ActionKind::remove, 1.0}; }
    static Action background_swap() { return {ActionKind::background_swap, 1.0}; }

    friend bool operator==(Action const&, Action const&) = default;
};

inline std::string_view to_string(ActionKind kind) {
    switch (kind) {
    case ActionKind::attribute: return "attribute";
    case ActionKind::resize: return "resize";
    case ActionKind::remove: return "remove";
    case ActionKind::background_swap: return "background_swap";
    }
    return "attribute";
}

struct ParsedInstruction {
    std::string raw;
    std::vector<std::string> tokens;
    std::vector<std::string> nouns;
    Action action;
    std::string descriptive_text;
};

/// Noun lexicon: built-in list plus whatever class labels the backends report.
class Lexicon {
  public:
    Lexicon() : words_(builtin().begin(), builtin().end()) {}

    static std::span<char const* const> builtin() {
        static constexpr char const* words[] = {
            "bird",   "belly",  "wing",   "wings",  "head",   "crown",  "beak",   "tail",    "breast", "eye",
            "eyes",   "feather", "feathers", "throat", "back", "circle", "square", "triangle", "shape", "object",
            "dog",    "puppy",  "cat",    "kitten", "book",   "car",    "bus",    "person",  "man",    "woman",
            "horse",  "cow",    "sheep",  "flower", "tree",   "sky",    "grass",  "water",   "road",   "boat",
            "plane",  "train",  "chair",  "table",  "cup",    "ball",   "box",    "disc",    "block",  "wedge",
            "background",
        };
        return words;
    }

    void add(std::string word) { words_.insert(std::move(word)); }
    void add_file(std::filesystem::path const& path) {
        std::ifstream in(path);
        if (!in) throw Error(ErrorKind::io, "cannot open lexicon " + path.string());
        std::string line;
        while (std::getline(in, line)) {
            while (!line.empty() && std::isspace(static_cast<unsigned char>(line.back()))) line.pop_back();
            if (!line.empty()) words_.insert(line);
        }
    }

    /// Returns the lexicon form of `token` (exact, or singular of a trailing-s plural).
    std::optional<std::string> match(std::string const& token) const {
        if (words_.contains(token)) return token;
        if (token.size() > 2 && token.back() == 's' && words_.contains(token.substr(0, token.size() - 1)))
            return token.substr(0, token.size() - 1);
        return std::nullopt;
    }

  private:
    std::set<std::string> words_;
};

namespace detail {

inline bool is_token_byte(unsigned char c) { return std::isalnum(c) || c == '.' || c >= 0x80; }

inline std::vector<std::string> tokenize(std::string_view raw) {
    std::vector<std::string> tokens;
    std::string cur;
    auto flush = [&] {
        while (!cur.empty() && cur.back() == '.') cur.pop_back();
        while (!cur.empty() && cur.front() == '.') cur.erase(cur.begin());
        if (!cur.empty()) tokens.push_back(cur);
        cur.clear();
    };
    for (char ch : raw) {
        auto c = static_cast<unsigned char>(ch);
        if (is_token_byte(c))
            cur.push_back(c < 0x80 ? static_cast<char>(std::tolower(c)) : ch);
        else
            flush();
    }
    flush();
    return tokens;
}

/// "<number>x" -> number.
inline std::optional<double> multiplier(std::string const& token) {
    if (token.size() < 2 || token.back() != 'x') return std::nullopt;
    std::string num = token.substr(0, token.size() - 1);
    if (num.empty() || !std::isdigit(static_cast<unsigned char>(num.front()))) return std::nullopt;
    if (std::count(num.begin(), num.end(), '.') > 1) return std::nullopt;
    if (!std::all_of(num.begin(), num.end(), [](char c) { return std::isdigit(static_cast<unsigned char>(c)) || c == '.'; }))
        return std::nullopt;
    double v = std::strtod(num.c_str(), nullptr);
    if (!(v > 0.0) || !std::isfinite(v)) return std::nullopt;
    return v;
}

struct KeywordScan {
    std::vector<double> resize_factors;
    bool remove = false;
    bool change_background = false;
    std::vector<bool> keyword; // per token
};

inline KeywordScan scan_keywords(std::vector<std::string> const& tokens) {
    KeywordScan s;
    s.keyword.assign(tokens.size(), false);
    for (size_t i = 0; i < tokens.size(); ++i) {
        if (auto m = multiplier(tokens[i]); m && i + 1 < tokens.size()) {
            auto const& next = tokens[i + 1];
            if (next == "large" || next == "larger") {
                s.resize_factors.push_back(*m);
                s.keyword[i] = s.keyword[i + 1] = true;
            } else if (next == "small" || next == "smaller") {
                s.resize_factors.push_back(1.0 / *m);
                s.keyword[i] = s.keyword[i + 1] = true;
            }
        }
        if (tokens[i] == "remove") {
            s.remove = true;
            s.keyword[i] = true;
        }
        if (i + 2 < tokens.size() && tokens[i] == "change" && tokens[i + 1] == "the" && tokens[i + 2] == "background") {
            s.change_background = true;
            s.keyword[i] = s.keyword[i + 1] = s.keyword[i + 2] = true;
        }
    }
    return s;
}

inline bool any_keyword(KeywordScan const& s) {
    return !s.resize_factors.empty() || s.remove || s.change_background;
}

inline std::vector<std::string> strip_keywords(std::vector<std::string> tokens) {
    // Removing a keyword can bring two other tokens together ("2x remove large"), so repeat.
    for (;;) {
        auto scan = scan_keywords(tokens);
        if (!any_keyword(scan)) return tokens;
        std::vector<std::string> kept;
        for (size_t i = 0; i < tokens.size(); ++i)
            if (!scan.keyword[i]) kept.push_back(tokens[i]);
        tokens = std::move(kept);
    }
}

inline std::string join(std::vector<std::string> const& tokens) {
    std::string out;
    for (auto const& t : tokens) {
        if (!out.empty()) out += ' ';
        out += t;
    }
    return out;
}

} // namespace detail

/// Keyword grammar, highest precedence first:
///   `<n>x large|larger` -> resize(n), `<n>x small|smaller` -> resize(1/n),
///   `remove` -> remove, `change the background` or a supplied reference background -> background swap,
///   anything else -> attribute.
/// Resize together with remove, or two different resize factors, is an ambiguity error.
inline ParsedInstruction parse_instruction(std::string_view raw, Lexicon const& lexicon = {},
                                           bool has_background = false) {
    ParsedInstruction out;
    out.raw = std::string(raw);
    out.tokens = detail::tokenize(raw);
    auto scan = detail::scan_keywords(out.tokens);

    std::vector<double> factors = scan.resize_factors;
    std::sort(factors.begin(), factors.end());
    factors.erase(std::unique(factors.begin(), factors.end()), factors.end());
    if (factors.size() > 1) throw Error(ErrorKind::ambiguity, "instruction asks for more than one resize factor");
    if (!factors.empty() && scan.remove) throw Error(ErrorKind::ambiguity, "instruction asks to both resize and remove");

    if (!factors.empty())
        out.action = Action::resize(factors.front());
    else if (scan.remove)
        out.action = Action::remove();
    else if (scan.change_background || has_background)
        out.action = Action::background_swap();

    auto descriptive = detail::strip_keywords(out.tokens);
    out.descriptive_text = detail::join(descriptive);
    for (auto const& t : descriptive) {
        if (auto noun = lexicon.match(t); noun && std::find(out.nouns.begin(), out.nouns.end(), *noun) == out.nouns.end())
            out.nouns.push_back(*noun);
    }
    return out;
}

inline double cosine_similarity(std::span<double const> u, std::span<double const> v) {
    if (u.size() != v.size()) throw Error(ErrorKind::shape, "cosine_similarity: vector lengths differ");
    double dot = 0, nu = 0, nv = 0;
    for (size_t i = 0; i < u.size(); ++i) {
        dot += u[i] * v[i];
        nu += u[i] * u[i];
        nv += v[i] * v[i];
    }
    if (nu <= 0.0 || nv <= 0.0) throw Error(ErrorKind::parameter, "cosine_similarity of a zero vector");
    return std::clamp(dot / (std::sqrt(nu) * std::sqrt(nv)), -1.0, 1.0);
}

/// Word -> unit vector. Unknown words get a deterministic pseudo-random unit vector
/// seeded from an FNV-1a hash of the word.
class EmbeddingTable {
  public:
    explicit EmbeddingTable(int dim = 64) : dim_(dim) {
        if (dim < 1) throw Error(ErrorKind::parameter, "embedding dimension must be positive");
    }

    int dim() const noexcept { return dim_; }
    size_t size() const noexcept { return vectors_.size(); }
    bool contains(std::string const& word) const { return vectors_.contains(word); }

    void set(std::string word, std::vector<double> v) {
        if (static_cast<int>(v.size()) != dim_) throw Error(ErrorKind::shape, "embedding has wrong dimension");
        double n = 0;
        for (double x : v) n += x * x;
        if (!(n > 0.0) || !std::isfinite(n)) throw Error(ErrorKind::parameter, "embedding for '" + word + "' is zero or non-finite");
        n = std::sqrt(n);
        for (double& x : v) x /= n;
        vectors_[std::move(word)] = std::move(v);
    }

    std::vector<double> embed(std::string const& word) const {
        if (auto it = vectors_.find(word); it != vectors_.end()) return it->second;
        return oov_vector(word);
    }

    std::vector<double> oov_vector(std::string const& word) const {
        uint64_t h = 1469598103934665603ull;
        for (unsigned char c : word) {
            h ^= c;
            h *= 1099511628211ull;
        }
        std::mt19937_64 rng(h);
        std::normal_distribution<double> n(0.0, 1.0);
        std::vector<double> v(dim_);
        double norm = 0;
        do {
            norm = 0;
            for (double& x : v) {
                x = n(rng);
                norm += x * x;
            }
        } while (norm == 0.0);
        norm = std::sqrt(norm);
        for (double& x : v) x /= norm;
        return v;
    }

    /// Text format: one `word v1 ... vD` entry per line. Blank lines and `#` comments are skipped.
    static EmbeddingTable load(std::filesystem::path const& path) {
        std::ifstream in(path);
        if (!in) throw Error(ErrorKind::io, "cannot open embedding file " + path.string());
        std::string line;
        std::optional<EmbeddingTable> table;
        int lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            if (line.empty() || line[0] == '#') continue;
            std::istringstream ss(line);
            std::string word;
            ss >> word;
            std::vector<double> v;
            double x;
            while (ss >> x) v.push_back(x);
            if (word.empty() || v.empty()) continue;
            if (!table) table.emplace(static_cast<int>(v.size()));
            if (static_cast<int>(v.size()) != table->dim())
                throw Error(ErrorKind::shape, "embedding file line " + std::to_string(lineno) + " has wrong dimension");
            table->set(word, std::move(v));
        }
        if (!table) throw Error(ErrorKind::parameter, "embedding file is empty");
        return std::move(*table);
    }

    /// Reference table: synonyms share a cluster axis, each with a small deterministic offset.
    static EmbeddingTable reference(int dim = 64) {
        EmbeddingTable t(dim);
        std::vector<std::vector<std::string>> clusters = {
            {"circle", "round", "disc", "ring", "ball", "dot"},
            {"square", "box", "block", "cube", "rectangle"},
            {"triangle", "wedge", "pyramid"},
            {"bird", "sparrow", "finch", "robin"},
            {"dog", "puppy", "hound"},
            {"cat", "kitten"},
            {"book", "notebook"},
            {"belly", "breast", "abdomen"},
            {"wing", "wings", "feather", "feathers"},
            {"head", "crown"},
            {"background", "backdrop", "scene"},
        };
        if (static_cast<int>(clusters.size()) * 2 > dim) throw Error(ErrorKind::parameter, "embedding dimension too small");
        for (size_t k = 0; k < clusters.size(); ++k)
            for (size_t j = 0; j < clusters[k].size(); ++j) {
                std::vector<double> v(dim, 0.0);
                v[k] = 1.0;
                // Synonyms sit slightly off-axis; the first word of a cluster is the axis itself.
                if (j > 0) v[clusters.size() + (k + j) % (dim - clusters.size())] = 0.25 * j;
                t.set(clusters[k][j], std::move(v));
            }
        return t;
    }

  private:
    int dim_;
    std::map<std::string, std::vector<double>> vectors_;
};

struct TargetSelection {
    std::string label;
    double score = 0.0;
    bool low_confidence = false;
};

/// argmax over (candidate, noun) pairs of cosine similarity. Ties keep the earliest
/// candidate, then the earliest noun.
inline TargetSelection select_target_class(std::span<std::string const> candidates, ParsedInstruction const& instruction,
                                           EmbeddingTable const& table, double threshold = 0.2) {
    if (instruction.nouns.empty()) throw Error(ErrorKind::no_target, "instruction names no object");
    if (candidates.empty()) throw Error(ErrorKind::no_target, "no candidate objects were detected");
    TargetSelection best{candidates.front(), -2.0, false};
    for (auto const& cand : candidates) {
        auto cv = table.embed(cand);
        for (auto const& noun : instruction.nouns) {
            double s = cosine_similarity(cv, table.embed(noun));
            if (s > best.score) best = {cand, s, false};
        }
    }
    best.low_confidence = best.score < threshold;
    return best;
}

} // namespace segedit
