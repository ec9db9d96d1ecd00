#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "tokenlab/rng.hpp"

namespace testutil {

// Dirichlet(1) row: normalized exponentials.
inline std::vector<double> random_prob_row(tokenlab::RngStream& rng, int n) {
    std::vector<double> row(static_cast<std::size_t>(n));
    double sum = 0.0;
    for (auto& x : row) {
        x = -std::log(rng.next_uniform_open());
        sum += x;
    }
    for (auto& x : row) x /= sum;
    return row;
}

inline std::vector<double> random_vector(tokenlab::RngStream& rng, int n, double scale = 1.0) {
    std::vector<double> v(static_cast<std::size_t>(n));
    for (auto& x : v) x = scale * rng.next_normal();
    return v;
}

class TempDir {
public:
    explicit TempDir(const std::string& tag) {
        path_ = std::filesystem::temp_directory_path() /
                ("tokenlab_test_" + tag + "_" + std::to_string(counter()++));
        std::filesystem::remove_all(path_);
        std::filesystem::create_directories(path_);
    }
    ~TempDir() { std::filesystem::remove_all(path_); }
    const std::filesystem::path& path() const { return path_; }
    std::string str() const { return path_.string(); }

private:
    static int& counter() {
        static int c = 0;
        return c;
    }
    std::filesystem::path path_;
};

inline std::string read_file(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

}  // namespace testutil
