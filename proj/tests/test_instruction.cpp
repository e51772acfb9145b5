#include "segedit/instruction.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>

using namespace segedit;

TEST(ParseInstruction, CoreKeywords) {
    EXPECT_EQ(parse_instruction("2x large").action, Action::resize(2.0));
    EXPECT_EQ(parse_instruction("4x small").action, Action::resize(0.25));
    EXPECT_EQ(parse_instruction("remove").action, Action::remove());
    EXPECT_EQ(parse_instruction("make the bird 2x larger").action, Action::resize(2.0));
    EXPECT_EQ(parse_instruction("the circle 2X Smaller").action, Action::resize(0.5));
    EXPECT_EQ(parse_instruction("please change the background").action, Action::background_swap());
    EXPECT_EQ(parse_instruction("the bird is red", {}, true).action, Action::background_swap());
}

TEST(ParseInstruction, NounsFromLexiconLookup) {
    auto p = parse_instruction("this bird is red and has a yellow belly");
    EXPECT_EQ(p.action, Action::attribute());
    // Oracle: every token the lexicon knows, in order of appearance.
    Lexicon lex;
    std::vector<std::string> expect;
    for (auto const& t : p.tokens)
        if (auto n = lex.match(t)) expect.push_back(*n);
    EXPECT_EQ(p.nouns, expect);
    EXPECT_NE(std::find(p.nouns.begin(), p.nouns.end(), "bird"), p.nouns.end());
    EXPECT_NE(std::find(p.nouns.begin(), p.nouns.end(), "belly"), p.nouns.end());
}

TEST(ParseInstruction, LexiconExtendsWithBackendLabels) {
    Lexicon lex;
    EXPECT_TRUE(parse_instruction("the zebra is pink", lex).nouns.empty());
    lex.add("zebra");
    EXPECT_EQ(parse_instruction("the zebras are pink", lex).nouns, std::vector<std::string>{"zebra"});
}

TEST(ParseInstruction, EmptyAndDescriptiveText) {
    auto e = parse_instruction("");
    EXPECT_TRUE(e.tokens.empty());
    EXPECT_TRUE(e.nouns.empty());
    EXPECT_EQ(e.action, Action::attribute());

    auto p = parse_instruction("Make the bird 2x large, please.");
    EXPECT_EQ(p.descriptive_text, "make the bird please");
    EXPECT_EQ(parse_instruction(p.descriptive_text).action, Action::attribute());
}

TEST(ParseInstruction, AmbiguityErrors) {
    for (char const* s : {"remove the bird 2x large", "2x large then 4x small", "4x smaller remove"}) {
        try {
            parse_instruction(s);
            FAIL() << s;
        } catch (Error const& e) {
            EXPECT_EQ(e.kind(), ErrorKind::ambiguity) << s;
        }
    }
    // Repeating the same factor is not a conflict.
    EXPECT_EQ(parse_instruction("2x large, yes 2x larger").action, Action::resize(2.0));
}

TEST(ParseInstruction, PrecedenceResizeOverRemoveFreeKeywords) {
    EXPECT_EQ(parse_instruction("remove and change the background").action, Action::remove());
    EXPECT_EQ(parse_instruction("change the background 2x large").action, Action::resize(2.0));
    EXPECT_EQ(parse_instruction("remove", {}, true).action, Action::remove());
}

TEST(ParseInstruction, KeywordPermutationsFollowPrecedenceOrRaise) {
    std::vector<std::string> pieces = {"2x large", "remove", "change the background", "the bird", "is red"};
    std::mt19937 rng(31);
    for (int trial = 0; trial < 300; ++trial) {
        std::vector<std::string> chosen;
        for (auto const& p : pieces)
            if (rng() % 2) chosen.push_back(p);
        std::shuffle(chosen.begin(), chosen.end(), rng);
        std::string text;
        for (auto const& c : chosen) text += c + " ";
        bool has_resize = std::count(chosen.begin(), chosen.end(), "2x large");
        bool has_remove = std::count(chosen.begin(), chosen.end(), "remove");
        bool has_bg = std::count(chosen.begin(), chosen.end(), "change the background");
        if (has_resize && has_remove) {
            EXPECT_THROW(parse_instruction(text), Error) << text;
            continue;
        }
        // Pieces can fuse across boundaries ("2x large" is self-contained, so only the phrase matters).
        auto action = parse_instruction(text).action;
        ActionKind expect = has_resize ? ActionKind::resize
                            : has_remove ? ActionKind::remove
                            : has_bg     ? ActionKind::background_swap
                                         : ActionKind::attribute;
        EXPECT_EQ(action.kind, expect) << text;
    }
}

TEST(ParseInstruction, TotalOnArbitraryBytesAndIdempotentDescriptive) {
    std::mt19937 rng(32);
    std::vector<std::string> vocab = {"2x", "large", "small", "4x", "remove", "change", "the", "background",
                                      "bird", "é", "\xff", "1.5x", "..", "x", "0x", "larger"};
    for (int trial = 0; trial < 500; ++trial) {
        std::string s;
        int n = rng() % 8;
        for (int i = 0; i < n; ++i) s += vocab[rng() % vocab.size()] + ((rng() % 3) ? " " : "");
        try {
            auto p = parse_instruction(s);
            EXPECT_EQ(parse_instruction(p.descriptive_text).action, Action::attribute()) << s;
        } catch (Error const& e) {
            EXPECT_EQ(e.kind(), ErrorKind::ambiguity);
        }
    }
}

TEST(CosineSimilarity, Examples) {
    std::vector<double> u{1, 0}, v{1, 1}, w{0, 1};
    EXPECT_DOUBLE_EQ(cosine_similarity(u, u), 1.0);
    EXPECT_DOUBLE_EQ(cosine_similarity(u, w), 0.0);
    EXPECT_NEAR(cosine_similarity(u, v), 1.0 / std::sqrt(2.0), 1e-15);
    std::vector<double> z{0, 0};
    try {
        cosine_similarity(u, z);
        FAIL();
    } catch (Error const& e) {
        EXPECT_EQ(e.kind(), ErrorKind::parameter);
    }
}

TEST(EmbeddingTable, UnitNormAndDeterministicOov) {
    auto t = EmbeddingTable::reference();
    for (auto const& w : {"circle", "round", "puppy", "unknownword"}) {
        auto v = t.embed(w);
        double n = 0;
        for (double x : v) n += x * x;
        EXPECT_NEAR(n, 1.0, 1e-12) << w;
    }
    EXPECT_EQ(t.embed("qwerty"), t.embed("qwerty"));
    EXPECT_NE(t.embed("qwerty"), t.embed("qwertz"));
    EXPECT_THROW(t.set("bad", std::vector<double>(64, 0.0)), Error);
}

TEST(EmbeddingTable, LoadsTextFormat) {
    auto path = std::filesystem::temp_directory_path() / "segedit_vectors.txt";
    std::ofstream(path) << "# comment\nbird 3 4\nbook 0 2\n";
    auto t = EmbeddingTable::load(path);
    EXPECT_EQ(t.dim(), 2);
    EXPECT_NEAR(t.embed("bird")[0], 0.6, 1e-12);
    EXPECT_NEAR(t.embed("book")[1], 1.0, 1e-12);
    std::ofstream(path) << "bird 1 2\nbook 1\n";
    EXPECT_THROW(EmbeddingTable::load(path), Error);
    std::filesystem::remove(path);
}

namespace {

// Exhaustive pair enumeration, kept independent of select_target_class.
std::pair<std::string, double> brute_force_select(std::vector<std::string> const& cands,
                                                  std::vector<std::string> const& nouns, EmbeddingTable const& t) {
    std::string best;
    double best_s = -10;
    for (size_t i = 0; i < cands.size(); ++i)
        for (size_t j = 0; j < nouns.size(); ++j) {
            auto a = t.embed(cands[i]), b = t.embed(nouns[j]);
            double dot = 0;
            for (size_t k = 0; k < a.size(); ++k) dot += a[k] * b[k];
            if (dot > best_s + 1e-15) best = cands[i], best_s = dot;
        }
    return {best, best_s};
}

} // namespace

TEST(SelectTargetClass, ExactMatch) {
    EmbeddingTable t(4);
    t.set("bird", {1, 0, 0, 0});
    ParsedInstruction p;
    p.nouns = {"bird"};
    std::vector<std::string> cands{"bird"};
    auto r = select_target_class(cands, p, t);
    EXPECT_EQ(r.label, "bird");
    EXPECT_DOUBLE_EQ(r.score, 1.0);
}

TEST(SelectTargetClass, ToyTableOrthogonalClasses) {
    EmbeddingTable t(4);
    t.set("bird", {1, 0, 0, 0});
    t.set("book", {0, 1, 0, 0});
    auto p = parse_instruction("this bird is red");
    std::vector<std::string> cands{"bird", "book"};
    auto r = select_target_class(cands, p, t);
    auto [label, score] = brute_force_select(cands, p.nouns, t);
    EXPECT_EQ(r.label, label);
    EXPECT_EQ(r.label, "bird");
    EXPECT_DOUBLE_EQ(r.score, 1.0);
    EXPECT_NEAR(r.score, score, 1e-12);
}

TEST(SelectTargetClass, SynonymNearCluster) {
    EmbeddingTable t(3);
    t.set("dog", {1, 0, 0});
    t.set("cat", {0, 1, 0});
    t.set("puppy", {0.9, 0.1, 0.3});
    ParsedInstruction p;
    p.nouns = {"puppy"};
    std::vector<std::string> cands{"dog", "cat"};
    auto r = select_target_class(cands, p, t);
    auto [label, score] = brute_force_select(cands, p.nouns, t);
    EXPECT_EQ(r.label, "dog");
    EXPECT_EQ(label, "dog");
    EXPECT_NEAR(r.score, 0.9 / std::sqrt(0.81 + 0.01 + 0.09), 1e-12);
    EXPECT_NEAR(r.score, score, 1e-12);
}

TEST(SelectTargetClass, ErrorsTiesAndLowConfidence) {
    auto t = EmbeddingTable::reference();
    ParsedInstruction none;
    std::vector<std::string> cands{"circle"};
    try {
        select_target_class(cands, none, t);
        FAIL();
    } catch (Error const& e) {
        EXPECT_EQ(e.kind(), ErrorKind::no_target);
    }
    ParsedInstruction p;
    p.nouns = {"bird"};
    std::vector<std::string> unrelated{"square", "circle"};
    auto r = select_target_class(unrelated, p, t);
    EXPECT_TRUE(r.low_confidence);
    // Both candidates are orthogonal to "bird": tie goes to the first.
    EXPECT_EQ(r.label, "square");
}

TEST(SelectTargetClass, ScaleInvariantArgmax) {
    std::mt19937 rng(33);
    std::normal_distribution<double> n;
    std::vector<std::string> words{"a", "b", "c", "d", "e"};
    for (int trial = 0; trial < 50; ++trial) {
        EmbeddingTable t1(6), t2(6);
        double s = std::exp(n(rng) * 3);
        for (auto const& w : words) {
            std::vector<double> v(6);
            for (double& x : v) x = n(rng);
            auto scaled = v;
            for (double& x : scaled) x *= s;
            t1.set(w, v);
            t2.set(w, scaled);
        }
        ParsedInstruction p;
        p.nouns = {"d", "e"};
        std::vector<std::string> cands{"a", "b", "c"};
        EXPECT_EQ(select_target_class(cands, p, t1).label, select_target_class(cands, p, t2).label);
    }
}
