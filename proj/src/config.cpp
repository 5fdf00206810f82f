#include "vfamc/config.hpp"

#include <fstream>

namespace vfamc {

Json read_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path.string());
    try {
        return Json::parse(in);
    } catch (const Json::exception& e) {
        throw ConfigError("invalid JSON in " + path.string() + ": " + e.what());
    }
}

ObjectReader::ObjectReader(const Json& j, std::string context) : j_(j), context_(std::move(context)) {
    if (!j_.is_object()) throw ConfigError(context_ + ": expected a JSON object");
}

bool ObjectReader::has(const std::string& key) const { return j_.contains(key); }

const Json& ObjectReader::raw(const std::string& key) {
    seen_.insert(key);
    if (!j_.contains(key)) throw ConfigError(context_ + ": missing required key '" + key + "'");
    return j_.at(key);
}

ObjectReader ObjectReader::child(const std::string& key) { return ObjectReader(raw(key), context_ + "." + key); }

void ObjectReader::finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
        if (!seen_.count(it.key())) throw ConfigError(context_ + ": unknown key '" + it.key() + "'");
}

Vec3 vec3_from_json(const Json& j, const std::string& what) {
    if (!j.is_array() || j.size() != 3) throw ConfigError(what + ": expected an array of 3 numbers");
    Vec3 v;
    for (int a = 0; a < 3; ++a) {
        if (!j.at(a).is_number()) throw ConfigError(what + ": expected numbers");
        v[a] = j.at(a).get<double>();
    }
    return v;
}

Json vec3_to_json(const Vec3& v) { return Json::array({v[0], v[1], v[2]}); }

Json transform_to_json(const RigidTransform& t) {
    Json rows = Json::array();
    for (int r = 0; r < 3; ++r) rows.push_back({t.rotation(r, 0), t.rotation(r, 1), t.rotation(r, 2)});
    return {{"rotation", rows}, {"translation_mm", vec3_to_json(t.translation_mm)}};
}

RigidTransform transform_from_json(const Json& j) {
    ObjectReader r(j, "transform");
    RigidTransform t;
    const Json& rows = r.raw("rotation");
    if (!rows.is_array() || rows.size() != 3) throw ConfigError("transform.rotation: expected 3 rows");
    for (int i = 0; i < 3; ++i) {
        const Vec3 row = vec3_from_json(rows.at(i), "transform.rotation");
        for (int c = 0; c < 3; ++c) t.rotation(i, c) = row[c];
    }
    t.translation_mm = vec3_from_json(r.raw("translation_mm"), "transform.translation_mm");
    r.finish();
    try {
        t.validate();
    } catch (const Error& e) {
        throw ConfigError(std::string("transform: ") + e.what());
    }
    return t;
}

}  // namespace vfamc
