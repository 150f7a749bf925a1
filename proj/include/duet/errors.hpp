#pragma once

#include <stdexcept>
#include <string>

namespace duet {

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Invalid or inconsistent configuration (widths, missing sets, toggles).
struct ConfigError : Error {
    using Error::Error;
};

// Bad caller-supplied data (empty text, NaN pixels, wrong sizes).
struct InputError : Error {
    using Error::Error;
};

// A file could not be read or parsed.
struct LoadError : Error {
    using Error::Error;
};

// A loaded document violates its schema or invariants.
struct ValidationError : Error {
    using Error::Error;
};

// An evaluation protocol lacks the metadata it needs.
struct ProtocolError : Error {
    using Error::Error;
};

// Index and checkpoint were produced by different models.
struct FingerprintMismatch : Error {
    using Error::Error;
};

// Training produced a non-finite loss.
struct NumericalError : Error {
    using Error::Error;
};

}  // namespace duet
