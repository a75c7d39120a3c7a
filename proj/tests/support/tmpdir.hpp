#pragma once

#include <filesystem>
#include <random>
#include <stdexcept>
#include <string>

namespace testsup {

// RAII scratch directory under the system temp root; removed recursively on
// scope exit so tests never leak files between runs.
class TmpDir {
  public:
    explicit TmpDir(const std::string& tag) {
        const auto root = std::filesystem::temp_directory_path();
        std::mt19937_64 rng(std::random_device{}());
        for (int attempt = 0; attempt < 64; ++attempt) {
            auto cand = root / (tag + "-" + std::to_string(rng()));
            std::error_code ec;
            if (std::filesystem::create_directory(cand, ec)) {
                path_ = cand;
                return;
            }
        }
        throw std::runtime_error("TmpDir: cannot create a scratch directory under " +
                                 root.string());
    }
    ~TmpDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TmpDir(const TmpDir&) = delete;
    TmpDir& operator=(const TmpDir&) = delete;

    const std::filesystem::path& path() const { return path_; }
    std::string str(const std::string& rel = "") const {
        return rel.empty() ? path_.string() : (path_ / rel).string();
    }

  private:
    std::filesystem::path path_;
};

}  // namespace testsup
