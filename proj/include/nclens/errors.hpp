#pragma once

#include <stdexcept>
#include <string>

namespace nclens {

// Base class for every error the library raises. `kind()` is the stable
// machine-readable tag the CLI reports in its error JSON.
class Error : public std::runtime_error {
public:
    Error(std::string kind, const std::string& message)
        : std::runtime_error(message), kind_(std::move(kind)) {}

    const std::string& kind() const noexcept { return kind_; }

private:
    std::string kind_;
};

#define NCLENS_DEFINE_ERROR(Name, tag)                                   \
    class Name : public Error {                                          \
    public:                                                              \
        explicit Name(const std::string& message) : Error(tag, message) {} \
    };

NCLENS_DEFINE_ERROR(ShapeError, "shape")
NCLENS_DEFINE_ERROR(NumericError, "numeric")
NCLENS_DEFINE_ERROR(ArgumentError, "argument")
NCLENS_DEFINE_ERROR(RangeError, "range")
NCLENS_DEFINE_ERROR(LoadError, "load")
NCLENS_DEFINE_ERROR(ParseError, "parse")
NCLENS_DEFINE_ERROR(EncodeError, "encode")
NCLENS_DEFINE_ERROR(StateError, "state")
NCLENS_DEFINE_ERROR(SpanError, "span")
NCLENS_DEFINE_ERROR(DegenerateFitError, "degenerate_fit")
NCLENS_DEFINE_ERROR(ConvergenceError, "convergence")
NCLENS_DEFINE_ERROR(DependencyError, "dependency")
NCLENS_DEFINE_ERROR(ConfigError, "config")
NCLENS_DEFINE_ERROR(SpecError, "spec")
NCLENS_DEFINE_ERROR(LeakageError, "leakage")
NCLENS_DEFINE_ERROR(ConsistencyError, "consistency")

#undef NCLENS_DEFINE_ERROR

} // namespace nclens
