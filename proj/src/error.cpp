#include "vfamc/error.hpp"

namespace vfamc {

void rethrow_with_context(const Error& e, const std::string& context) {
    throw Error(e.kind(), context + ": " + e.what());
}

int exit_code(ErrorKind kind) noexcept {
    switch (kind) {
        case ErrorKind::Config:
        case ErrorKind::Geometry: return 2;
        case ErrorKind::Numerical: return 3;
        case ErrorKind::Io: return 4;
    }
    return 1;
}

}  // namespace vfamc
