#include "elvis/descriptors.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <numeric>

namespace elvis {

void RawDescriptorSet::validate() const {
    if (strengths.size() != descriptors.cols()) {
        throw DimensionError("descriptor set '" + image_id + "': " +
                             std::to_string(strengths.size()) + " strengths for " +
                             std::to_string(descriptors.cols()) + " descriptors");
    }
    if (descriptors.rows() == 0 || descriptors.cols() == 0) {
        throw DimensionError("descriptor set '" + image_id + "' is empty");
    }
}

std::vector<std::size_t> top_m_indices(std::span<const float> strengths, std::size_t m) {
    std::vector<std::size_t> order(strengths.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    const std::size_t keep = std::min(m, order.size());
    auto stronger = [&](std::size_t a, std::size_t b) {
        if (strengths[a] != strengths[b]) return strengths[a] > strengths[b];
        return a < b;
    };
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(keep), order.end(),
                      stronger);
    order.resize(keep);
    return order;
}

RawDescriptorSet select_top_m(const RawDescriptorSet& raw, std::size_t m) {
    if (m == 0) throw UsageError("select_top_m: m must be at least 1");
    const auto picked = top_m_indices(raw.strengths, m);
    RawDescriptorSet out;
    out.image_id = raw.image_id;
    out.descriptors = MatrixF(raw.dim(), picked.size());
    out.strengths.resize(picked.size());
    for (std::size_t c = 0; c < picked.size(); ++c) {
        out.strengths[c] = raw.strengths[picked[c]];
        for (std::size_t r = 0; r < raw.dim(); ++r) out.descriptors(r, c) = raw.descriptors(r, picked[c]);
    }
    return out;
}

ProjectedDescriptorSet project(const RawDescriptorSet& raw, const ProjectionParams& params) {
    if (params.input_dim() != raw.dim()) {
        throw DimensionError("project: projection expects " + std::to_string(params.input_dim()) +
                             "-dim input, descriptors are " + std::to_string(raw.dim()) + "-dim");
    }
    const std::size_t out_dim = params.output_dim();
    if (params.bias.size() != out_dim || params.ln_gain.size() != out_dim ||
        params.ln_bias.size() != out_dim) {
        throw DimensionError("project: bias/layer-norm lengths do not match output dim");
    }
    ProjectedDescriptorSet out;
    out.image_id = raw.image_id;
    out.descriptors = Matrix(out_dim, raw.count());
    out.degenerate.assign(raw.count(), false);

    Vector input(raw.dim());
    Vector linear(out_dim);
    for (std::size_t c = 0; c < raw.count(); ++c) {
        for (std::size_t r = 0; r < raw.dim(); ++r) input[r] = raw.descriptors(r, c);
        for (std::size_t o = 0; o < out_dim; ++o) linear[o] = params.bias[o] + dot(params.weight.row(o), input);
        const Vector normed = layer_norm(linear, params.ln_gain, params.ln_bias, params.ln_eps);
        const NormalizedVector unit = l2_normalize(normed);
        out.degenerate[c] = unit.degenerate;
        out.descriptors.set_column(c, unit.values);
    }
    return out;
}

ProjectedDescriptorSet normalize_raw(const RawDescriptorSet& raw) {
    ProjectedDescriptorSet out;
    out.image_id = raw.image_id;
    out.descriptors = Matrix(raw.dim(), raw.count());
    out.degenerate.assign(raw.count(), false);
    Vector column(raw.dim());
    for (std::size_t c = 0; c < raw.count(); ++c) {
        for (std::size_t r = 0; r < raw.dim(); ++r) column[r] = raw.descriptors(r, c);
        const NormalizedVector unit = l2_normalize(column);
        out.degenerate[c] = unit.degenerate;
        out.descriptors.set_column(c, unit.values);
    }
    return out;
}

namespace {

template <typename U>
void put_le(std::ostream& os, U value) {
    static_assert(std::is_unsigned_v<U>);
    unsigned char bytes[sizeof(U)];
    for (std::size_t k = 0; k < sizeof(U); ++k) bytes[k] = static_cast<unsigned char>(value >> (8 * k));
    os.write(reinterpret_cast<const char*>(bytes), sizeof(U));
}

void put_f32(std::ostream& os, float value) { put_le(os, std::bit_cast<std::uint32_t>(value)); }

class Reader {
public:
    Reader(std::istream& is, const std::filesystem::path& path) : is_(is), path_(path) {}

    void read(char* dst, std::size_t n, const char* what) {
        is_.read(dst, static_cast<std::streamsize>(n));
        if (static_cast<std::size_t>(is_.gcount()) != n) {
            throw FormatError(path_.string() + ": truncated file while reading " + what);
        }
    }

    template <typename U>
    U get_le(const char* what) {
        unsigned char bytes[sizeof(U)];
        read(reinterpret_cast<char*>(bytes), sizeof(U), what);
        U value = 0;
        for (std::size_t k = 0; k < sizeof(U); ++k) value |= static_cast<U>(U(bytes[k]) << (8 * k));
        return value;
    }

    float get_f32(const char* what) { return std::bit_cast<float>(get_le<std::uint32_t>(what)); }

private:
    std::istream& is_;
    const std::filesystem::path& path_;
};

DatasetHeader read_header(Reader& in, const std::filesystem::path& path) {
    char magic[4];
    in.read(magic, 4, "magic");
    if (std::memcmp(magic, kDatasetMagic, 4) != 0) {
        throw FormatError(path.string() + ": not a descriptor dataset (expected magic 'ELVD')");
    }
    DatasetHeader header;
    header.version = in.get_le<std::uint32_t>("version");
    if (header.version != kDatasetVersion) {
        throw FormatError(path.string() + ": unsupported ELVD version " + std::to_string(header.version));
    }
    header.image_count = in.get_le<std::uint32_t>("image count");
    header.dim = in.get_le<std::uint32_t>("dim");
    return header;
}

}  // namespace

DescriptorDataset write_dataset(std::span<const RawDescriptorSet> sets,
                                const std::filesystem::path& path) {
    const std::uint32_t dim = sets.empty() ? 0 : static_cast<std::uint32_t>(sets.front().dim());
    std::unordered_map<std::string, bool> seen;
    for (const auto& set : sets) {
        set.validate();
        if (set.dim() != dim) throw DimensionError("write_dataset: mixed descriptor dimensions");
        if (set.image_id.size() > 0xFFFF) throw FormatError("write_dataset: image id too long");
        if (!seen.emplace(set.image_id, true).second) {
            throw FormatError("write_dataset: duplicate image id '" + set.image_id + "'");
        }
    }

    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open " + path.string() + " for writing");
    os.write(kDatasetMagic, 4);
    put_le(os, kDatasetVersion);
    put_le(os, static_cast<std::uint32_t>(sets.size()));
    put_le(os, dim);
    for (const auto& set : sets) {
        put_le(os, static_cast<std::uint16_t>(set.image_id.size()));
        os.write(set.image_id.data(), static_cast<std::streamsize>(set.image_id.size()));
        put_le(os, static_cast<std::uint32_t>(set.count()));
        for (float s : set.strengths) put_f32(os, s);
        for (std::size_t c = 0; c < set.count(); ++c)
            for (std::size_t r = 0; r < set.dim(); ++r) put_f32(os, set.descriptors(r, c));
    }
    os.flush();
    if (!os) throw IoError("failed writing " + path.string());
    os.close();
    return DescriptorDataset::open(path);
}

DescriptorDataset DescriptorDataset::open(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open descriptor dataset " + path.string());
    std::error_code ec;
    const auto file_size = std::filesystem::file_size(path, ec);
    if (ec) throw IoError("cannot stat " + path.string());

    DescriptorDataset ds;
    ds.path_ = path;
    Reader in(is, ds.path_);
    ds.header_ = read_header(in, path);

    std::uint64_t offset = 16;
    for (std::uint32_t k = 0; k < ds.header_.image_count; ++k) {
        const std::uint64_t start = offset;
        const auto id_len = in.get_le<std::uint16_t>("id length");
        std::string id(id_len, '\0');
        in.read(id.data(), id_len, "image id");
        const auto count = in.get_le<std::uint32_t>("descriptor count");
        const std::uint64_t payload =
            std::uint64_t{count} * 4 + std::uint64_t{count} * ds.header_.dim * 4;
        offset += 2 + id_len + 4 + payload;
        if (offset > file_size) {
            throw FormatError(path.string() + ": truncated file in image '" + id + "'");
        }
        is.seekg(static_cast<std::streamoff>(offset));
        if (!ds.index_.emplace(id, start).second) {
            throw FormatError(path.string() + ": duplicate image id '" + id + "'");
        }
        ds.order_.push_back(std::move(id));
    }
    return ds;
}

std::uint64_t DescriptorDataset::offset_of(const std::string& image_id) const {
    const auto it = index_.find(image_id);
    if (it == index_.end()) throw NotFoundError("image id '" + image_id + "' not in " + path_.string());
    return it->second;
}

RawDescriptorSet DescriptorDataset::read_image(const std::string& image_id) const {
    const std::uint64_t offset = offset_of(image_id);
    std::ifstream is(path_, std::ios::binary);
    if (!is) throw IoError("cannot open descriptor dataset " + path_.string());
    is.seekg(static_cast<std::streamoff>(offset));
    Reader in(is, path_);

    RawDescriptorSet out;
    const auto id_len = in.get_le<std::uint16_t>("id length");
    out.image_id.resize(id_len);
    in.read(out.image_id.data(), id_len, "image id");
    const auto count = in.get_le<std::uint32_t>("descriptor count");
    const std::size_t dim = header_.dim;

    // Bulk read then decode; payload is little-endian f32.
    std::vector<unsigned char> buffer((std::size_t{count} + std::size_t{count} * dim) * 4);
    in.read(reinterpret_cast<char*>(buffer.data()), buffer.size(), "descriptor payload");
    auto f32_at = [&](std::size_t k) {
        const unsigned char* p = buffer.data() + 4 * k;
        const std::uint32_t bits = std::uint32_t(p[0]) | (std::uint32_t(p[1]) << 8) |
                                   (std::uint32_t(p[2]) << 16) | (std::uint32_t(p[3]) << 24);
        return std::bit_cast<float>(bits);
    };
    out.strengths.resize(count);
    for (std::size_t c = 0; c < count; ++c) out.strengths[c] = f32_at(c);
    out.descriptors = MatrixF(dim, count);
    for (std::size_t c = 0; c < count; ++c)
        for (std::size_t r = 0; r < dim; ++r) out.descriptors(r, c) = f32_at(count + c * dim + r);
    return out;
}

std::vector<RawDescriptorSet> DescriptorDataset::read_all() const {
    std::vector<RawDescriptorSet> out;
    out.reserve(order_.size());
    for (const auto& id : order_) out.push_back(read_image(id));
    return out;
}

}  // namespace elvis
