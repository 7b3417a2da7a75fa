#pragma once

// NIfTI-1 single-file (.nii / .nii.gz) reading and writing for intensity
// volumes, label maps, and 3-vector displacement/velocity fields.
//
// World coordinates are NIfTI's (RAS, mm). The sform is preferred over the
// qform when both are set; a header without either falls back to pixdim
// scaling. Grids must have orthonormal direction cosines (reflections allowed).

#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include <zlib.h>

#include "atlasreg/field.hpp"
#include "atlasreg/volume.hpp"

namespace atlasreg {

class IoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

namespace nifti {

#pragma pack(push, 1)
struct Header {
    std::int32_t sizeof_hdr;
    char data_type[10];
    char db_name[18];
    std::int32_t extents;
    std::int16_t session_error;
    char regular;
    char dim_info;
    std::int16_t dim[8];
    float intent_p1, intent_p2, intent_p3;
    std::int16_t intent_code;
    std::int16_t datatype;
    std::int16_t bitpix;
    std::int16_t slice_start;
    float pixdim[8];
    float vox_offset;
    float scl_slope, scl_inter;
    std::int16_t slice_end;
    char slice_code;
    char xyzt_units;
    float cal_max, cal_min;
    float slice_duration;
    float toffset;
    std::int32_t glmax, glmin;
    char descrip[80];
    char aux_file[24];
    std::int16_t qform_code, sform_code;
    float quatern_b, quatern_c, quatern_d;
    float qoffset_x, qoffset_y, qoffset_z;
    float srow_x[4], srow_y[4], srow_z[4];
    char intent_name[16];
    char magic[4];
};
#pragma pack(pop)
static_assert(sizeof(Header) == 348);

enum DataType : std::int16_t {
    kUint8 = 2,
    kInt16 = 4,
    kInt32 = 8,
    kFloat32 = 16,
    kFloat64 = 64,
    kInt8 = 256,
    kUint16 = 512,
    kUint32 = 768,
    kInt64 = 1024,
    kUint64 = 1280,
};

inline constexpr std::int16_t kIntentVector = 1007;

inline int bytes_per_voxel(std::int16_t dt)
{
    switch (dt) {
    case kUint8:
    case kInt8:
        return 1;
    case kInt16:
    case kUint16:
        return 2;
    case kInt32:
    case kUint32:
    case kFloat32:
        return 4;
    case kFloat64:
    case kInt64:
    case kUint64:
        return 8;
    default:
        return 0;
    }
}

template <class T>
T byteswap(T v)
{
    auto* p = reinterpret_cast<unsigned char*>(&v);
    for (std::size_t i = 0; i < sizeof(T) / 2; ++i)
        std::swap(p[i], p[sizeof(T) - 1 - i]);
    return v;
}

inline void swap_header(Header& h)
{
    h.sizeof_hdr = byteswap(h.sizeof_hdr);
    for (auto& d : h.dim)
        d = byteswap(d);
    h.intent_code = byteswap(h.intent_code);
    h.datatype = byteswap(h.datatype);
    h.bitpix = byteswap(h.bitpix);
    for (auto& p : h.pixdim)
        p = byteswap(p);
    h.vox_offset = byteswap(h.vox_offset);
    h.scl_slope = byteswap(h.scl_slope);
    h.scl_inter = byteswap(h.scl_inter);
    h.qform_code = byteswap(h.qform_code);
    h.sform_code = byteswap(h.sform_code);
    for (float* f : {&h.quatern_b, &h.quatern_c, &h.quatern_d, &h.qoffset_x, &h.qoffset_y, &h.qoffset_z})
        *f = byteswap(*f);
    for (int i = 0; i < 4; ++i) {
        h.srow_x[i] = byteswap(h.srow_x[i]);
        h.srow_y[i] = byteswap(h.srow_y[i]);
        h.srow_z[i] = byteswap(h.srow_z[i]);
    }
}

/// Raw file contents: header plus voxel bytes in file order.
struct RawImage {
    Header header{};
    std::vector<unsigned char> data;
    bool swapped = false;
};

inline bool is_gz(const std::filesystem::path& p) { return p.extension() == ".gz"; }

inline RawImage read_raw(const std::filesystem::path& path)
{
    if (!std::filesystem::exists(path))
        throw IoError("file not found: " + path.string());
    gzFile f = gzopen(path.string().c_str(), "rb");
    if (!f)
        throw IoError("cannot open " + path.string());
    auto fail = [&](const std::string& msg) {
        gzclose(f);
        throw IoError(path.string() + ": " + msg);
    };
    RawImage r;
    if (gzread(f, &r.header, sizeof(Header)) != int(sizeof(Header)))
        fail("truncated header");
    if (r.header.sizeof_hdr != 348) {
        swap_header(r.header);
        if (r.header.sizeof_hdr != 348)
            fail("not a NIfTI-1 file (sizeof_hdr)");
        r.swapped = true;
    }
    if (std::memcmp(r.header.magic, "n+1\0", 4) != 0)
        fail("only single-file NIfTI-1 (magic n+1) is supported");
    const int bpv = bytes_per_voxel(r.header.datatype);
    if (bpv == 0)
        fail("unsupported datatype " + std::to_string(r.header.datatype));
    const int nd = r.header.dim[0];
    if (nd < 1 || nd > 7)
        fail("invalid dim[0] " + std::to_string(nd));
    std::int64_t n = 1;
    for (int i = 1; i <= nd; ++i) {
        if (r.header.dim[i] < 1)
            fail("invalid dimension " + std::to_string(r.header.dim[i]));
        n *= r.header.dim[i];
    }
    const auto offset = std::int64_t(r.header.vox_offset);
    if (offset < 348)
        fail("invalid vox_offset");
    std::vector<unsigned char> skip(std::size_t(offset - 348));
    if (!skip.empty() && gzread(f, skip.data(), unsigned(skip.size())) != int(skip.size()))
        fail("truncated extension block");
    r.data.resize(std::size_t(n * bpv));
    std::size_t got = 0;
    while (got < r.data.size()) {
        const unsigned chunk = unsigned(std::min<std::size_t>(r.data.size() - got, 1u << 30));
        const int k = gzread(f, r.data.data() + got, chunk);
        if (k <= 0)
            fail("truncated voxel data");
        got += std::size_t(k);
    }
    gzclose(f);
    if (r.swapped) {
        for (std::size_t i = 0; i < r.data.size(); i += std::size_t(bpv))
            std::reverse(r.data.begin() + std::ptrdiff_t(i), r.data.begin() + std::ptrdiff_t(i) + bpv);
    }
    return r;
}

inline double voxel_value(const RawImage& r, std::int64_t i)
{
    const unsigned char* p = r.data.data();
    auto get = [&](auto tag) {
        decltype(tag) v;
        std::memcpy(&v, p + i * std::int64_t(sizeof(v)), sizeof(v));
        return double(v);
    };
    switch (r.header.datatype) {
    case kUint8: return get(std::uint8_t{});
    case kInt8: return get(std::int8_t{});
    case kInt16: return get(std::int16_t{});
    case kUint16: return get(std::uint16_t{});
    case kInt32: return get(std::int32_t{});
    case kUint32: return get(std::uint32_t{});
    case kFloat32: return get(float{});
    case kFloat64: return get(double{});
    case kInt64: return get(std::int64_t{});
    case kUint64: return get(std::uint64_t{});
    default: throw IoError("unsupported datatype");
    }
}

/// Voxel→world 4×4 matrix from the header.
inline Mat4 header_affine(const Header& h)
{
    Mat4 m = Mat4::Identity();
    if (h.sform_code > 0) {
        for (int c = 0; c < 4; ++c) {
            m(0, c) = h.srow_x[c];
            m(1, c) = h.srow_y[c];
            m(2, c) = h.srow_z[c];
        }
        return m;
    }
    const double dx = h.pixdim[1], dy = h.dim[0] >= 2 ? h.pixdim[2] : 1.0, dz = h.dim[0] >= 3 ? h.pixdim[3] : 1.0;
    if (h.qform_code > 0) {
        const double b = h.quatern_b, c = h.quatern_c, d = h.quatern_d;
        const double a = std::sqrt(std::max(0.0, 1.0 - (b * b + c * c + d * d)));
        Mat3 r;
        r << a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c), 2 * (b * c + a * d),
            a * a + c * c - b * b - d * d, 2 * (c * d - a * b), 2 * (b * d - a * c), 2 * (c * d + a * b),
            a * a + d * d - c * c - b * b;
        const double qfac = h.pixdim[0] < 0 ? -1.0 : 1.0;
        m.topLeftCorner<3, 3>() = r * Vec3(dx, dy, qfac * dz).asDiagonal();
        m.topRightCorner<3, 1>() = Vec3(h.qoffset_x, h.qoffset_y, h.qoffset_z);
        return m;
    }
    m.topLeftCorner<3, 3>() = Vec3(dx, dy, dz).asDiagonal();
    return m;
}

inline SamplingGrid grid_from_header(const Header& h, const std::string& what)
{
    if (h.dim[0] < 3 || h.dim[1] < 1 || h.dim[2] < 1 || h.dim[3] < 1)
        throw IoError(what + ": not a 3-D volume");
    const Mat4 m = header_affine(h);
    if (!m.allFinite())
        throw IoError(what + ": non-finite header geometry");
    const Mat3 lin = m.topLeftCorner<3, 3>();
    Vec3 spacing;
    Mat3 dir;
    for (int a = 0; a < 3; ++a) {
        spacing[a] = lin.col(a).norm();
        if (!(spacing[a] > 0))
            throw IoError(what + ": non-invertible header geometry");
        dir.col(a) = lin.col(a) / spacing[a];
    }
    if ((dir.transpose() * dir - Mat3::Identity()).cwiseAbs().maxCoeff() > 1e-4)
        throw IoError(what + ": sheared header geometry is not supported");
    // Re-orthonormalise the float-precision direction cosines.
    Eigen::JacobiSVD<Mat3> svd(dir, Eigen::ComputeFullU | Eigen::ComputeFullV);
    dir = svd.matrixU() * svd.matrixV().transpose();
    return SamplingGrid({h.dim[1], h.dim[2], h.dim[3]}, spacing, dir, m.topRightCorner<3, 1>());
}

/// Header describing `grid` with the given datatype and trailing vector length.
inline Header make_header(const SamplingGrid& grid, std::int16_t datatype, int components, const std::string& descrip)
{
    Header h{};
    h.sizeof_hdr = 348;
    h.regular = 'r';
    const Shape3& s = grid.shape();
    if (s.nx > 32767 || s.ny > 32767 || s.nz > 32767)
        throw IoError("grid too large for NIfTI-1");
    h.dim[0] = components > 1 ? 5 : 3;
    h.dim[1] = std::int16_t(s.nx);
    h.dim[2] = std::int16_t(s.ny);
    h.dim[3] = std::int16_t(s.nz);
    for (int i = 4; i < 8; ++i)
        h.dim[i] = 1;
    if (components > 1) {
        h.dim[5] = std::int16_t(components);
        h.intent_code = kIntentVector;
    }
    h.datatype = datatype;
    h.bitpix = std::int16_t(8 * bytes_per_voxel(datatype));
    h.vox_offset = 352.0f;
    h.scl_slope = 1.0f;
    h.xyzt_units = 2; // mm
    for (int i = 0; i < 8; ++i)
        h.pixdim[i] = 1.0f;
    h.pixdim[1] = float(grid.spacing().x());
    h.pixdim[2] = float(grid.spacing().y());
    h.pixdim[3] = float(grid.spacing().z());
    std::strncpy(h.descrip, descrip.c_str(), sizeof(h.descrip) - 1);

    const Mat4 m = grid.voxel_to_world_matrix();
    h.sform_code = 2; // aligned
    for (int c = 0; c < 4; ++c) {
        h.srow_x[c] = float(m(0, c));
        h.srow_y[c] = float(m(1, c));
        h.srow_z[c] = float(m(2, c));
    }
    Mat3 r = grid.direction();
    if (r.determinant() < 0) {
        h.pixdim[0] = -1.0f;
        r.col(2) *= -1.0;
    }
    const Eigen::Quaterniond q(r);
    Eigen::Vector4d qv(q.w(), q.x(), q.y(), q.z());
    if (qv[0] < 0)
        qv = -qv;
    h.qform_code = 2;
    h.quatern_b = float(qv[1]);
    h.quatern_c = float(qv[2]);
    h.quatern_d = float(qv[3]);
    h.qoffset_x = float(m(0, 3));
    h.qoffset_y = float(m(1, 3));
    h.qoffset_z = float(m(2, 3));
    std::memcpy(h.magic, "n+1\0", 4);
    return h;
}

/// Writes header + data to a temporary sibling and renames it into place.
inline void write_raw(const std::filesystem::path& path, const Header& h, const void* data, std::size_t bytes)
{
    if (path.has_parent_path())
        std::filesystem::create_directories(path.parent_path());
    const auto tmp = std::filesystem::path(path.string() + ".tmp");
    const bool gz = is_gz(path);
    const char ext[4] = {0, 0, 0, 0};
    if (gz) {
        gzFile f = gzopen(tmp.string().c_str(), "wb6");
        if (!f)
            throw IoError("cannot write " + tmp.string());
        bool ok = gzwrite(f, &h, sizeof(Header)) == int(sizeof(Header)) && gzwrite(f, ext, 4) == 4;
        const auto* p = static_cast<const unsigned char*>(data);
        for (std::size_t done = 0; ok && done < bytes;) {
            const unsigned chunk = unsigned(std::min<std::size_t>(bytes - done, 1u << 30));
            ok = gzwrite(f, p + done, chunk) == int(chunk);
            done += chunk;
        }
        ok = gzclose(f) == Z_OK && ok;
        if (!ok)
            throw IoError("write failed: " + tmp.string());
    } else {
        std::FILE* f = std::fopen(tmp.string().c_str(), "wb");
        if (!f)
            throw IoError("cannot write " + tmp.string());
        bool ok = std::fwrite(&h, sizeof(Header), 1, f) == 1 && std::fwrite(ext, 1, 4, f) == 4 &&
                  (bytes == 0 || std::fwrite(data, 1, bytes, f) == bytes);
        ok = std::fclose(f) == 0 && ok;
        if (!ok)
            throw IoError("write failed: " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

} // namespace nifti

inline ImageVolume load_image(const std::filesystem::path& path)
{
    const auto r = nifti::read_raw(path);
    const auto grid = nifti::grid_from_header(r.header, path.string());
    if (r.header.dim[0] > 3 && (r.header.dim[4] > 1 || r.header.dim[5] > 1))
        throw IoError(path.string() + ": not a 3-D volume");
    double slope = r.header.scl_slope, inter = r.header.scl_inter;
    if (slope == 0 || !std::isfinite(slope)) {
        slope = 1;
        inter = 0;
    }
    Array3<float> a(grid.shape());
    for (std::int64_t i = 0; i < a.size(); ++i)
        a[i] = float(nifti::voxel_value(r, i) * slope + inter);
    return ImageVolume(std::move(a), grid, path.stem().string());
}

inline LabelMap load_labels(const std::filesystem::path& path, LabelNames names = {})
{
    const auto r = nifti::read_raw(path);
    const auto grid = nifti::grid_from_header(r.header, path.string());
    if (r.header.dim[0] > 3 && (r.header.dim[4] > 1 || r.header.dim[5] > 1))
        throw IoError(path.string() + ": not a 3-D volume");
    Array3<std::int32_t> a(grid.shape());
    for (std::int64_t i = 0; i < a.size(); ++i) {
        const double v = nifti::voxel_value(r, i);
        if (v != std::round(v) || std::abs(v) > 2147483647.0)
            throw IoError(path.string() + ": label volume holds non-integer value " + std::to_string(v));
        a[i] = std::int32_t(v);
    }
    return LabelMap(std::move(a), grid, std::move(names));
}

inline void save_image(const std::filesystem::path& path, const Array3<float>& data, const SamplingGrid& grid,
                       const std::string& descrip = {})
{
    if (!(data.shape() == grid.shape()))
        throw GeometryError("save_image: data and grid shapes differ");
    const auto h = nifti::make_header(grid, nifti::kFloat32, 1, descrip);
    nifti::write_raw(path, h, data.data(), std::size_t(data.size()) * sizeof(float));
}

inline void save_image(const std::filesystem::path& path, const ImageVolume& v, const std::string& descrip = {})
{
    save_image(path, v.data(), v.grid(), descrip);
}

inline void save_labels(const std::filesystem::path& path, const Array3<std::int32_t>& data, const SamplingGrid& grid,
                        const std::string& descrip = {})
{
    if (!(data.shape() == grid.shape()))
        throw GeometryError("save_labels: data and grid shapes differ");
    const auto h = nifti::make_header(grid, nifti::kInt32, 1, descrip);
    nifti::write_raw(path, h, data.data(), std::size_t(data.size()) * sizeof(std::int32_t));
}

inline void save_labels(const std::filesystem::path& path, const LabelMap& m, const std::string& descrip = {})
{
    save_labels(path, m.data(), m.grid(), descrip);
}

inline void save_mask(const std::filesystem::path& path, const Mask& m, const SamplingGrid& grid,
                      const std::string& descrip = {})
{
    if (!(m.shape() == grid.shape()))
        throw GeometryError("save_mask: data and grid shapes differ");
    const auto h = nifti::make_header(grid, nifti::kUint8, 1, descrip);
    nifti::write_raw(path, h, m.data(), std::size_t(m.size()));
}

/// Vector fields are stored as float64 5-D volumes (x, y, z, 1, 3) in world mm.
template <class Tag>
void save_field(const std::filesystem::path& path, const VectorField<Tag>& f, const std::string& descrip = {})
{
    const auto n = std::size_t(f.size());
    std::vector<double> buf(3 * n);
    for (std::size_t i = 0; i < n; ++i)
        for (int c = 0; c < 3; ++c)
            buf[std::size_t(c) * n + i] = f[std::int64_t(i)][c];
    const auto h = nifti::make_header(f.grid(), nifti::kFloat64, 3, descrip);
    nifti::write_raw(path, h, buf.data(), buf.size() * sizeof(double));
}

template <class Tag>
VectorField<Tag> load_field(const std::filesystem::path& path)
{
    const auto r = nifti::read_raw(path);
    const auto grid = nifti::grid_from_header(r.header, path.string());
    if (r.header.dim[0] != 5 || r.header.dim[4] != 1 || r.header.dim[5] != 3)
        throw IoError(path.string() + ": expected a 3-component vector field");
    VectorField<Tag> f(grid);
    const std::int64_t n = grid.size();
    for (std::int64_t i = 0; i < n; ++i)
        for (int c = 0; c < 3; ++c)
            f[i][c] = nifti::voxel_value(r, std::int64_t(c) * n + i);
    if (!f.all_finite())
        throw IoError(path.string() + ": field holds non-finite values");
    return f;
}

} // namespace atlasreg
