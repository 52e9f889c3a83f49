#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace apl {

// Deterministic RNG. mt19937_64 with hand-rolled draws so that streams do not
// depend on the standard library's distribution implementations.
class Rng {
public:
    explicit Rng(uint64_t seed) : state_(seed) { init(); }

    uint64_t next_u64();

    // uniform in [0, 1)
    double uniform();

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // uniform integer in [0, n)
    uint64_t uniform_int(uint64_t n);

    // standard normal, Box-Muller with cached spare
    double normal();

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    template <class T>
    void shuffle(std::vector<T>& v) {
        if (v.size() <= 1) return;
        for (size_t i = v.size() - 1; i > 0; --i) {
            size_t j = static_cast<size_t>(uniform_int(i + 1));
            std::swap(v[i], v[j]);
        }
    }

private:
    void init();

    uint64_t mt_[312];
    int idx_ = 312;
    uint64_t state_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

// splitmix64 step; used to derive independent sub-seeds from one master seed.
uint64_t derive_seed(uint64_t base, uint64_t stream);

// FNV-1a 64-bit over raw bytes.
uint64_t fnv1a64(const void* data, size_t len, uint64_t h = 0xcbf29ce484222325ull);
std::string hash_hex(uint64_t h);

std::string read_text_file(const std::filesystem::path& path);
// Writes to <path>.tmp then renames, so readers never see a torn file.
void atomic_write_file(const std::filesystem::path& path, const std::string& content);
std::string file_hash_hex(const std::filesystem::path& path);

} // namespace apl
