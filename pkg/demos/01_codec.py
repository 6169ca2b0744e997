"""Encode a few values, then decode them from a stream that arrives in pieces."""

from quotecast.resp import NEED_MORE, Decoder, encode, encode_command

wire = encode_command(["PUBLISH", "ES=F", "1647381600;4261.75;-0.25;-0.0059;1200000"])
print("PUBLISH on the wire:", wire)

reply = encode([b"message", b"ES=F", b"1;0;0;0;0"])
dec = Decoder()
for i in range(0, len(reply), 7):
    dec.feed(reply[i:i + 7])
    value = dec.gets()
    print(f"after {min(i + 7, len(reply)):2d} bytes:", "waiting" if value is NEED_MORE else value)
