/* Second-language reference: SplitMix64 outputs and a CTED tensor file.
 * Build: cc -O0 -o reference reference.c && ./reference out.cted
 */
#include <stdint.h>
#include <stdio.h>
#include <string.h>

static uint64_t x;

static uint64_t next(void) {
    uint64_t z = (x += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

static void put_u32(FILE *f, uint32_t v) {
    for (int i = 0; i < 4; i++) fputc((v >> (8 * i)) & 0xff, f);
}

static void put_u64(FILE *f, uint64_t v) {
    for (int i = 0; i < 8; i++) fputc((v >> (8 * i)) & 0xff, f);
}

int main(int argc, char **argv) {
    x = 0;
    for (int i = 0; i < 5; i++) printf("%016llx\n", (unsigned long long)next());
    if (argc < 2) return 0;
    FILE *f = fopen(argv[1], "wb");
    if (!f) return 1;
    /* 2 x 3 x 2 tensor, value i -> (i - 5) * 0.375f, plus two awkward values */
    float data[12];
    for (int i = 0; i < 12; i++) data[i] = (float)(i - 5) * 0.375f;
    data[3] = 1.0f / 3.0f;
    data[7] = -1e-30f;
    fwrite("CTED", 1, 4, f);
    put_u32(f, 1);
    put_u32(f, 3);
    put_u64(f, 2); put_u64(f, 3); put_u64(f, 2);
    for (int i = 0; i < 12; i++) {
        uint32_t bits;
        memcpy(&bits, &data[i], 4);
        put_u32(f, bits);
    }
    fclose(f);
    return 0;
}
