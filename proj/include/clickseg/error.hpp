#ifndef CLICKSEG_ERROR_HPP
#define CLICKSEG_ERROR_HPP

#include <stdexcept>
#include <string>

namespace clickseg {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Tensor or image dimensions do not agree with an operation's contract.
class ShapeError : public Error {
public:
    using Error::Error;
};

/// A value lies outside an operation's domain (NaN, out-of-range probability, bad index).
class DomainError : public Error {
public:
    using Error::Error;
};

/// An API was used out of order (e.g. backward twice on one tape).
class ContractError : public Error {
public:
    using Error::Error;
};

/// File or codec failure.
class IoError : public Error {
public:
    using Error::Error;
};

} // namespace clickseg

#endif // CLICKSEG_ERROR_HPP
