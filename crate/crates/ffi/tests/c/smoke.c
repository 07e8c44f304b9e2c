#include <stdio.h>
#include <string.h>

#include "scaseg.h"

#define CHECK(call)                                                         \
    do {                                                                    \
        ScasegStatus s_ = (call);                                           \
        if (s_ != SCASEG_STATUS_OK) {                                       \
            fprintf(stderr, "%s -> %d: %s\n", #call, (int)s_,               \
                    scaseg_last_error() ? scaseg_last_error() : "(none)");  \
            return 1;                                                       \
        }                                                                   \
    } while (0)

int main(int argc, char **argv) {
    if (argc < 2) {
        fprintf(stderr, "usage: smoke OUT.scat\n");
        return 2;
    }
    ScasegDecoder *dec = NULL;
    CHECK(scaseg_decoder_new("{\"decoder\": {\"num_classes\": 3}}", &dec));

    ScasegTensor *mask = NULL;
    CHECK(scaseg_decoder_forward_synthetic(dec, &mask));
    size_t shape[4];
    CHECK(scaseg_tensor_shape(mask, shape, 4));
    printf("mask %zu %zu %zu %zu\n", shape[0], shape[1], shape[2], shape[3]);
    CHECK(scaseg_tensor_write_scat(mask, argv[1]));

    uint64_t flops = 0;
    CHECK(scaseg_closed_form_flops(SCASEG_MIXER_SCA, 64, 32, &flops));
    printf("sca %llu\n", (unsigned long long)flops);

    if (scaseg_decoder_new("{\"seed\": -1}", &dec) != SCASEG_STATUS_CONFIG) return 1;
    printf("config error: %s\n", scaseg_last_error());

    scaseg_tensor_free(mask);
    scaseg_decoder_free(dec);
    return 0;
}
