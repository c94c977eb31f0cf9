// Every heap block starts on a 64-byte boundary. Eigen picks a scalar head
// for its vectorized reductions based on the buffer address, so without this
// the same tensor could sum in a different order depending on where malloc
// placed it, and reruns from a checkpoint would drift in the last bits.
#include <cstdlib>
#include <new>

namespace {

constexpr std::size_t kAlign = 64;

void* allocate(std::size_t n) noexcept {
    void* p = nullptr;
    if (posix_memalign(&p, kAlign, n == 0 ? 1 : n) != 0) return nullptr;
    return p;
}

void* allocate_or_throw(std::size_t n) {
    for (;;) {
        if (void* p = allocate(n)) return p;
        std::new_handler h = std::get_new_handler();
        if (h == nullptr) throw std::bad_alloc();
        h();
    }
}

}  // namespace

void* operator new(std::size_t n) { return allocate_or_throw(n); }
void* operator new[](std::size_t n) { return allocate_or_throw(n); }
void* operator new(std::size_t n, const std::nothrow_t&) noexcept { return allocate(n); }
void* operator new[](std::size_t n, const std::nothrow_t&) noexcept { return allocate(n); }
void operator delete(void* p) noexcept { std::free(p); }
void operator delete[](void* p) noexcept { std::free(p); }
void operator delete(void* p, std::size_t) noexcept { std::free(p); }
void operator delete[](void* p, std::size_t) noexcept { std::free(p); }
void operator delete(void* p, const std::nothrow_t&) noexcept { std::free(p); }
void operator delete[](void* p, const std::nothrow_t&) noexcept { std::free(p); }
