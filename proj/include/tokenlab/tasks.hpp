#pragma once

#include <cstdint>
#include <fstream>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "tokenlab/errors.hpp"
#include "tokenlab/rng.hpp"

namespace tokenlab::tasks {

// Character-level tokenizer plus multi-character markers. The boxed-open
// marker is a single token so generated responses can carry the literal
// "\boxed{...}" syntax the verifier scans for.
class Vocabulary {
public:
    static const Vocabulary& standard() {
        static const Vocabulary vocab = [] {
            Vocabulary v;
            v.add("\n");        // end-of-response token, id 0
            v.add("\\boxed{");  // boxed-open marker, id 1
            v.add("}");
            for (char c = '0'; c <= '9'; ++c) v.add(std::string(1, c));
            for (char c = 'a'; c <= 'z'; ++c) v.add(std::string(1, c));
            for (const char* s : {" ", "+", "-", "×", "÷", "(", ")", "=", "?", ";"}) {
                v.add(s);
            }
            return v;
        }();
        return vocab;
    }

    int size() const { return static_cast<int>(symbols_.size()); }
    int end_token() const { return 0; }
    int boxed_open_token() const { return 1; }

    const std::string& symbol(int id) const {
        if (id < 0 || id >= size()) {
            throw input_error("vocabulary: token id out of range");
        }
        return symbols_[static_cast<std::size_t>(id)];
    }

    int id_of(std::string_view symbol) const {
        for (int i = 0; i < size(); ++i) {
            if (symbols_[static_cast<std::size_t>(i)] == symbol) return i;
        }
        throw input_error("vocabulary: unknown symbol");
    }

    // Greedy longest-match over the symbol set.
    std::vector<int> encode(std::string_view text) const {
        std::vector<int> out;
        std::size_t pos = 0;
        while (pos < text.size()) {
            int matched = -1;
            std::size_t matched_len = 0;
            for (int i = 0; i < size(); ++i) {
                const auto& sym = symbols_[static_cast<std::size_t>(i)];
                if (sym.size() > matched_len && text.substr(pos, sym.size()) == sym) {
                    matched = i;
                    matched_len = sym.size();
                }
            }
            if (matched < 0) {
                throw input_error("vocabulary: cannot encode text at byte " + std::to_string(pos));
            }
            out.push_back(matched);
            pos += matched_len;
        }
        return out;
    }

    std::string decode(std::span<const int> tokens) const {
        std::string out;
        for (int t : tokens) out += symbol(t);
        return out;
    }

private:
    void add(std::string s) { symbols_.push_back(std::move(s)); }
    std::vector<std::string> symbols_;
};

struct ProblemInstance {
    std::string prompt;
    std::string answer;  // exact integer as a string
    int difficulty = 0;
    std::uint64_t seed = 0;
};

namespace detail {

// Exact integer evaluation of an operand/operator chain with x and / binding
// tighter than + and -, all left-associative.
inline std::int64_t evaluate_chain(const std::vector<std::int64_t>& operands,
                                   const std::vector<char>& ops) {
    std::int64_t total = 0;
    std::int64_t term = operands[0];
    char pending = '+';
    for (std::size_t i = 0; i < ops.size(); ++i) {
        const char op = ops[i];
        const std::int64_t rhs = operands[i + 1];
        if (op == '*') {
            term *= rhs;
        } else if (op == '/') {
            if (rhs == 0 || term % rhs != 0) {
                throw numeric_error("evaluate_chain: inexact division");
            }
            term /= rhs;
        } else {
            total += pending == '+' ? term : -term;
            pending = op;
            term = rhs;
        }
    }
    total += pending == '+' ? term : -term;
    return total;
}

}  // namespace detail

// Random integer expression with `difficulty` binary operations, operands in
// [1, 20], division drawn only from exact divisors of the running term value.
inline ProblemInstance generate_problem(int difficulty, RngStream& rng) {
    if (difficulty < 1) {
        throw input_error("generate_problem: difficulty must be >= 1");
    }
    if (difficulty > 8) {
        throw input_error("generate_problem: difficulty above 8 not supported");
    }
    std::vector<std::int64_t> operands;
    std::vector<char> ops;
    operands.push_back(rng.next_int(1, 20));
    std::int64_t term = operands.back();
    static constexpr char kOps[4] = {'+', '-', '*', '/'};
    for (int i = 0; i < difficulty; ++i) {
        const char op = kOps[rng.next_int(0, 3)];
        ops.push_back(op);
        std::int64_t operand;
        if (op == '/') {
            std::vector<std::int64_t> divisors;
            for (std::int64_t d = 1; d <= 20 && d <= term; ++d) {
                if (term % d == 0) divisors.push_back(d);
            }
            operand = divisors[static_cast<std::size_t>(
                rng.next_int(0, static_cast<int>(divisors.size()) - 1))];
            term /= operand;
        } else if (op == '*') {
            operand = rng.next_int(1, 20);
            term *= operand;
        } else {
            operand = rng.next_int(1, 20);
            term = operand;
        }
        operands.push_back(operand);
    }

    std::string expr = std::to_string(operands[0]);
    for (std::size_t i = 0; i < ops.size(); ++i) {
        switch (ops[i]) {
            case '+': expr += "+"; break;
            case '-': expr += "-"; break;
            case '*': expr += "×"; break;
            case '/': expr += "÷"; break;
        }
        expr += std::to_string(operands[i + 1]);
    }

    ProblemInstance instance;
    instance.prompt = "what is " + expr + " ? boxed answer ;";
    instance.answer = std::to_string(detail::evaluate_chain(operands, ops));
    instance.difficulty = difficulty;
    return instance;
}

inline ProblemInstance generate_problem(int difficulty, std::uint64_t seed) {
    RngStream rng = RngStream::derive(seed, {0x7461736bULL, static_cast<std::uint64_t>(difficulty)});
    ProblemInstance instance = generate_problem(difficulty, rng);
    instance.seed = seed;
    return instance;
}

// Exact-arithmetic re-evaluation of a rendered expression; the independent
// check used by tests and by gen-data verification.
inline std::int64_t evaluate_expression(std::string_view expr) {
    std::vector<std::int64_t> operands;
    std::vector<char> ops;
    std::size_t pos = 0;
    auto read_int = [&]() {
        std::int64_t value = 0;
        bool any = false;
        while (pos < expr.size() && expr[pos] >= '0' && expr[pos] <= '9') {
            value = value * 10 + (expr[pos] - '0');
            ++pos;
            any = true;
        }
        if (!any) throw input_error("evaluate_expression: expected integer");
        return value;
    };
    operands.push_back(read_int());
    while (pos < expr.size()) {
        char op;
        if (expr[pos] == '+') {
            op = '+';
            pos += 1;
        } else if (expr[pos] == '-') {
            op = '-';
            pos += 1;
        } else if (expr.substr(pos, 2) == "×") {
            op = '*';
            pos += 2;
        } else if (expr.substr(pos, 2) == "÷") {
            op = '/';
            pos += 2;
        } else {
            throw input_error("evaluate_expression: unexpected character");
        }
        ops.push_back(op);
        operands.push_back(read_int());
    }
    return detail::evaluate_chain(operands, ops);
}

inline void dump_problems(const std::vector<ProblemInstance>& problems, const std::string& path) {
    std::ofstream out(path);
    if (!out) {
        throw io_error("dump_problems: cannot open " + path);
    }
    for (const auto& p : problems) {
        nlohmann::json record{{"prompt", p.prompt},
                              {"answer", p.answer},
                              {"difficulty", p.difficulty},
                              {"seed", p.seed}};
        out << record.dump() << "\n";
    }
}

inline std::vector<ProblemInstance> load_problems(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw io_error("load_problems: cannot open " + path);
    }
    std::vector<ProblemInstance> problems;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto record = nlohmann::json::parse(line);
        problems.push_back({record.at("prompt").get<std::string>(),
                            record.at("answer").get<std::string>(),
                            record.at("difficulty").get<int>(),
                            record.at("seed").get<std::uint64_t>()});
    }
    return problems;
}

}  // namespace tokenlab::tasks
