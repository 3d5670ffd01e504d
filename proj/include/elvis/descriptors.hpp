#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "elvis/linalg.hpp"

namespace elvis {

// Local descriptors of one image as stored on disk: a D′×M matrix, one
// column per descriptor, with a detector strength per column.
struct RawDescriptorSet {
    std::string image_id;
    MatrixF descriptors;          // D′ × M
    std::vector<float> strengths;  // M

    std::size_t dim() const noexcept { return descriptors.rows(); }
    std::size_t count() const noexcept { return descriptors.cols(); }

    // Throws DimensionError when the strength count and column count differ
    // or the set is empty.
    void validate() const;

    friend bool operator==(const RawDescriptorSet&, const RawDescriptorSet&) = default;
};

// Descriptors after the projection stage: D×M, unit-norm columns except
// the ones flagged degenerate.
struct ProjectedDescriptorSet {
    std::string image_id;
    Matrix descriptors;            // D × M
    std::vector<bool> degenerate;  // M

    std::size_t dim() const noexcept { return descriptors.rows(); }
    std::size_t count() const noexcept { return descriptors.cols(); }
};

// Linear layer (weight D×D′ row-major, bias D) followed by layer norm and
// per-descriptor ℓ2 normalization.
struct ProjectionParams {
    Matrix weight;  // D × D′
    Vector bias;    // D
    Vector ln_gain;
    Vector ln_bias;
    double ln_eps = 1e-5;

    std::size_t input_dim() const noexcept { return weight.cols(); }
    std::size_t output_dim() const noexcept { return weight.rows(); }
};

// Columns with the m highest strengths, strongest first; ties go to the
// lower original index.
RawDescriptorSet select_top_m(const RawDescriptorSet& raw, std::size_t m);

// Indices chosen by select_top_m, in selection order.
std::vector<std::size_t> top_m_indices(std::span<const float> strengths, std::size_t m);

ProjectedDescriptorSet project(const RawDescriptorSet& raw, const ProjectionParams& params);

// ℓ2-normalizes raw descriptors without any learned map. Used by the
// parameter-free baselines and by the "no projection" ablation.
ProjectedDescriptorSet normalize_raw(const RawDescriptorSet& raw);

// ELVD binary container. Little-endian throughout:
//   "ELVD" | u32 version | u32 image_count | u32 dim
//   per image: u16 id_len | id bytes | u32 M | M×f32 strengths |
//              M×D′ f32 descriptors, descriptor-contiguous
struct DatasetHeader {
    std::uint32_t version = 0;
    std::uint32_t image_count = 0;
    std::uint32_t dim = 0;
};

inline constexpr char kDatasetMagic[4] = {'E', 'L', 'V', 'D'};
inline constexpr std::uint32_t kDatasetVersion = 1;

class DescriptorDataset {
public:
    // Scans the file once and builds the id → offset index.
    static DescriptorDataset open(const std::filesystem::path& path);

    const std::filesystem::path& path() const noexcept { return path_; }
    const DatasetHeader& header() const noexcept { return header_; }
    // Image ids in file order.
    const std::vector<std::string>& image_ids() const noexcept { return order_; }
    bool contains(const std::string& image_id) const { return index_.contains(image_id); }
    std::uint64_t offset_of(const std::string& image_id) const;

    // Safe to call concurrently; each call opens its own stream.
    RawDescriptorSet read_image(const std::string& image_id) const;
    std::vector<RawDescriptorSet> read_all() const;

private:
    std::filesystem::path path_;
    DatasetHeader header_;
    std::unordered_map<std::string, std::uint64_t> index_;
    std::vector<std::string> order_;
};

DescriptorDataset write_dataset(std::span<const RawDescriptorSet> sets,
                                const std::filesystem::path& path);

}  // namespace elvis
