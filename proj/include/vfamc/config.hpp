#pragma once

#include <filesystem>
#include <set>
#include <string>
#include <vector>

#include "vfamc/error.hpp"
#include "vfamc/io.hpp"

namespace vfamc {

// Reads a JSON config file; unreadable files are IoError, malformed JSON is ConfigError.
Json read_config(const std::filesystem::path& path);

// Typed access to a JSON object that rejects keys nobody asked for.
//
//   ObjectReader r(j, "phantom");
//   int n = r.get("dims", 64);
//   r.finish();  // throws ConfigError on unknown keys
class ObjectReader {
public:
    ObjectReader(const Json& j, std::string context);

    bool has(const std::string& key) const;
    const Json& raw(const std::string& key);

    template <typename T>
    T get(const std::string& key, const T& fallback) {
        seen_.insert(key);
        if (!j_.contains(key)) return fallback;
        return convert<T>(key);
    }

    template <typename T>
    T require(const std::string& key) {
        seen_.insert(key);
        if (!j_.contains(key)) throw ConfigError(context_ + ": missing required key '" + key + "'");
        return convert<T>(key);
    }

    // Nested object reader; the key must hold an object.
    ObjectReader child(const std::string& key);

    void finish() const;
    const std::string& context() const { return context_; }

private:
    template <typename T>
    T convert(const std::string& key) const {
        try {
            return j_.at(key).get<T>();
        } catch (const Json::exception& e) {
            throw ConfigError(context_ + "." + key + ": " + e.what());
        }
    }

    const Json& j_;
    std::string context_;
    std::set<std::string> seen_;
};

Vec3 vec3_from_json(const Json& j, const std::string& what);
Json vec3_to_json(const Vec3& v);

// {"rotation": 3x3 rows, "translation_mm": [x, y, z]}
Json transform_to_json(const RigidTransform& t);
RigidTransform transform_from_json(const Json& j);

}  // namespace vfamc
