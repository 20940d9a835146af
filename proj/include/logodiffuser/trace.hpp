#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "logodiffuser/matrix.hpp"
#include "logodiffuser/tensor_file.hpp"

namespace logodiffuser {

/// I2I attention recorded during glyph reconstruction: for every captured
/// step, layer and head, the N_img x N_img logits and probabilities.
/// Immutable once built; the checksum is computed at construction.
class AttentionTrace {
public:
    AttentionTrace() = default;
    /// `logits` and `probabilities` are laid out [step][layer][head][row][col].
    AttentionTrace(int steps, int layers, int heads, int n_img, std::vector<double> t_values,
                   std::vector<float> logits, std::vector<float> probabilities, std::uint64_t config_hash = 0);

    int steps() const noexcept { return steps_; }
    int layers() const noexcept { return layers_; }
    int heads() const noexcept { return heads_; }
    int n_img() const noexcept { return n_img_; }
    bool empty() const noexcept { return steps_ == 0; }
    std::size_t map_count() const noexcept {
        return static_cast<std::size_t>(steps_) * layers_ * heads_;
    }
    const std::vector<double>& t_values() const noexcept { return t_values_; }
    std::uint64_t config_hash() const noexcept { return config_hash_; }
    std::uint64_t checksum() const noexcept { return checksum_; }

    ConstMatrixView<float> logits(int step, int layer, int head) const;
    ConstMatrixView<float> probabilities(int step, int layer, int head) const;

    TensorFile to_file() const;
    static AttentionTrace from_file(const TensorFile& f);
    void save(const std::filesystem::path& path) const { to_file().save(path); }
    static AttentionTrace load(const std::filesystem::path& path) { return from_file(TensorFile::load(path)); }

private:
    std::size_t offset(int step, int layer, int head) const;

    int steps_ = 0;
    int layers_ = 0;
    int heads_ = 0;
    int n_img_ = 0;
    std::vector<double> t_values_;
    std::vector<float> logits_;
    std::vector<float> probabilities_;
    std::uint64_t config_hash_ = 0;
    std::uint64_t checksum_ = 0;
};

}  // namespace logodiffuser
