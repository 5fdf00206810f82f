#include "vfamc/io.hpp"

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

#include <openssl/evp.h>

#include "vfamc/error.hpp"

namespace vfamc {

namespace fs = std::filesystem;

fs::path sidecar_path(const fs::path& p) {
    fs::path out = p;
    out.replace_extension(".json");
    return out;
}

fs::path raw_path(const fs::path& p) {
    fs::path out = p;
    out.replace_extension(".raw");
    return out;
}

Json grid_to_json(const Grid& g) {
    Json j;
    j["dims"] = {g.dims[0], g.dims[1], g.dims[2]};
    const Vec3 vs = g.voxel_size();
    j["voxel_size_mm"] = {vs[0], vs[1], vs[2]};
    Json rows = Json::array();
    for (int r = 0; r < 4; ++r) rows.push_back({g.affine(r, 0), g.affine(r, 1), g.affine(r, 2), g.affine(r, 3)});
    j["affine"] = rows;
    return j;
}

Grid grid_from_json(const Json& j) {
    Grid g;
    try {
        const auto& d = j.at("dims");
        if (d.size() != 3) throw GeometryError("dims must have 3 entries");
        for (int a = 0; a < 3; ++a) g.dims[a] = d.at(a).get<int>();
        const auto& aff = j.at("affine");
        if (aff.size() != 4) throw GeometryError("affine must have 4 rows");
        for (int r = 0; r < 4; ++r) {
            if (aff.at(r).size() != 4) throw GeometryError("affine rows must have 4 entries");
            for (int c = 0; c < 4; ++c) g.affine(r, c) = aff.at(r).at(c).get<double>();
        }
    } catch (const Json::exception& e) {
        throw GeometryError(std::string("malformed geometry: ") + e.what());
    }
    g.validate();
    if (j.contains("voxel_size_mm")) {
        const Vec3 vs = g.voxel_size();
        const auto& jv = j.at("voxel_size_mm");
        if (jv.size() != 3) throw GeometryError("voxel_size_mm must have 3 entries");
        for (int a = 0; a < 3; ++a) {
            const double declared = jv.at(a).get<double>();
            if (!(declared > 0.0) || std::abs(declared - vs[a]) > 1e-6 * vs[a])
                throw GeometryError("voxel_size_mm disagrees with the affine column norms");
        }
    }
    return g;
}

Json read_json(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path.string());
    try {
        return Json::parse(in);
    } catch (const Json::exception& e) {
        throw IoError("invalid JSON in " + path.string() + ": " + e.what());
    }
}

void write_text(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    out << text;
    if (!out) throw IoError("write failed for " + path.string());
}

void write_json(const fs::path& path, const Json& j) { write_text(path, j.dump(2) + "\n"); }

void write_volume(const fs::path& path, const Volume& v, const Json& extra) {
    Json side = grid_to_json(v.grid());
    side["intent"] = v.intent;
    for (auto it = extra.begin(); it != extra.end(); ++it) side[it.key()] = it.value();
    write_json(sidecar_path(path), side);

    std::vector<std::uint32_t> words(v.size());
    for (std::size_t n = 0; n < v.size(); ++n) {
        const float f = static_cast<float>(v[n]);
        std::uint32_t w;
        std::memcpy(&w, &f, sizeof w);
        if constexpr (std::endian::native == std::endian::big) w = __builtin_bswap32(w);
        words[n] = w;
    }
    const fs::path raw = raw_path(path);
    std::ofstream out(raw, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + raw.string());
    out.write(reinterpret_cast<const char*>(words.data()), static_cast<std::streamsize>(words.size() * 4));
    if (!out) throw IoError("write failed for " + raw.string());
}

Volume read_volume(const fs::path& path, Json* sidecar) {
    const Json side = read_json(sidecar_path(path));
    const Grid g = grid_from_json(side);
    const fs::path raw = raw_path(path);
    std::ifstream in(raw, std::ios::binary);
    if (!in) throw IoError("cannot open " + raw.string());
    std::vector<std::uint32_t> words(g.size());
    in.read(reinterpret_cast<char*>(words.data()), static_cast<std::streamsize>(words.size() * 4));
    if (in.gcount() != static_cast<std::streamsize>(words.size() * 4))
        throw IoError("raw file " + raw.string() + " is shorter than its geometry requires");
    std::vector<double> data(g.size());
    for (std::size_t n = 0; n < data.size(); ++n) {
        std::uint32_t w = words[n];
        if constexpr (std::endian::native == std::endian::big) w = __builtin_bswap32(w);
        float f;
        std::memcpy(&f, &w, sizeof f);
        data[n] = f;
    }
    Volume v(g, std::move(data));
    v.intent = side.value("intent", std::string());
    if (sidecar) *sidecar = side;
    return v;
}

namespace {

std::string to_hex(const unsigned char* bytes, unsigned int n) {
    std::ostringstream s;
    for (unsigned int i = 0; i < n; ++i) s << std::hex << std::setw(2) << std::setfill('0') << int(bytes[i]);
    return s.str();
}

std::string digest_stream(std::istream& in) {
    EVP_MD_CTX* ctx = EVP_MD_CTX_new();
    if (!ctx) throw IoError("sha256: context allocation failed");
    EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr);
    char buf[1 << 15];
    while (in) {
        in.read(buf, sizeof buf);
        if (in.gcount() > 0) EVP_DigestUpdate(ctx, buf, static_cast<std::size_t>(in.gcount()));
    }
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    EVP_DigestFinal_ex(ctx, md, &len);
    EVP_MD_CTX_free(ctx);
    return to_hex(md, len);
}

}  // namespace

std::string sha256_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    return digest_stream(in);
}

std::string sha256_string(const std::string& bytes) {
    std::istringstream in(bytes);
    return digest_stream(in);
}

}  // namespace vfamc
